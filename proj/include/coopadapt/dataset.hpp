#pragma once

#include <cstdint>
#include <string>

#include "coopadapt/geometry.hpp"

namespace coopadapt {

// Read-only view over an on-disk dataset written by synthgen. Frames are
// loaded lazily; `with_labels = false` never touches labels.json, which is
// what keeps target-domain training honest about the unsupervised contract.
class Dataset {
 public:
  static Dataset open(const std::string& root);

  int size() const { return n_frames_; }
  Domain domain() const { return domain_; }
  const std::string& root() const { return root_; }
  std::uint64_t generator_seed() const { return seed_; }

  CollaborativeSample load_frame(int idx, bool with_labels) const;

 private:
  std::string root_;
  Domain domain_ = Domain::source;
  int n_frames_ = 0;
  std::uint64_t seed_ = 0;
};

}  // namespace coopadapt
