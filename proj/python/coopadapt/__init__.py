from ._coopadapt import *  # noqa: F401,F403
