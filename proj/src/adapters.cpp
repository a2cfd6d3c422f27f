#include "coopadapt/adapters.hpp"

#include <cmath>
#include <stdexcept>

namespace coopadapt::adapters {

namespace {

ad::Tensor he_normal(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
  ad::Tensor t(std::move(shape));
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = sigma * rng.normal();
  return t;
}

// Hidden-layer biases start slightly positive to keep generic inputs off the
// ReLU kink (matters for the finite-difference gradient contracts).
constexpr double kPreReluBias = 0.01;

}  // namespace

LsaAdapter::LsaAdapter(int in_channels, int height, int width, const LsaConfig& cfg,
                       std::uint64_t seed, const std::string& name_prefix)
    : cfg_(cfg) {
  if (in_channels < 1 || height < 1 || width < 1) {
    throw std::invalid_argument("LsaAdapter: bad dimensions");
  }
  if (cfg.hidden < 1) throw std::invalid_argument("LsaAdapter: bad hidden width");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) {
    throw std::invalid_argument("LsaAdapter: dropout must be in [0, 1)");
  }
  Rng rng(derive_seed(seed, "lsa_init"));
  m_loc_ = ad::parameter(name_prefix + ".m_loc", ad::Tensor::full({height, width}, 1.0));
  const int h = cfg.hidden;
  fc1_w_ = ad::parameter(name_prefix + ".fc1.w", he_normal({in_channels, h}, in_channels, rng));
  fc1_b_ = ad::parameter(name_prefix + ".fc1.b", ad::Tensor::full({h}, kPreReluBias));
  fc2_w_ = ad::parameter(name_prefix + ".fc2.w", he_normal({h, h}, h, rng));
  fc2_b_ = ad::parameter(name_prefix + ".fc2.b", ad::Tensor::full({h}, kPreReluBias));
  fc3_w_ = ad::parameter(name_prefix + ".fc3.w", he_normal({h, 1}, h, rng));
  fc3_b_ = ad::parameter(name_prefix + ".fc3.b", ad::Tensor({1}));
}

ad::Value LsaAdapter::select(const ad::Value& encoded) const {
  if (!cfg_.use_lfs) return encoded;
  return ad::mul_bcast_hw(encoded, m_loc_);
}

ad::Value LsaAdapter::pool(const ad::Value& weighted) { return ad::mean_hw(weighted); }

ad::Value LsaAdapter::discriminate(const ad::Value& pooled, bool training,
                                   Rng* dropout_rng) const {
  if (pooled->val.ndim() != 1) throw std::invalid_argument("discriminate: expected a vector");
  auto x = ad::reshape(pooled, {1, pooled->val.shape[0]});
  auto h1 = ad::relu(ad::linear(x, fc1_w_, fc1_b_));
  if (training && cfg_.dropout > 0.0) {
    if (!dropout_rng) throw std::invalid_argument("discriminate: missing dropout stream");
    h1 = ad::dropout(h1, cfg_.dropout, *dropout_rng);
  }
  auto h2 = ad::relu(ad::linear(h1, fc2_w_, fc2_b_));
  if (training && cfg_.dropout > 0.0) {
    h2 = ad::dropout(h2, cfg_.dropout, *dropout_rng);
  }
  auto logit = ad::linear(h2, fc3_w_, fc3_b_);
  return ad::reshape(logit, {1});
}

std::vector<ad::Value> LsaAdapter::params() const {
  return {m_loc_, fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_};
}

ad::Value lsa_loss(const std::vector<LsaBatchItem>& batch, const LsaAdapter& adapter, double gamma,
                   bool training, Rng* dropout_rng) {
  if (batch.empty()) throw std::invalid_argument("lsa_loss: empty batch");
  ad::Value total;
  for (const auto& item : batch) {
    auto reversed = ad::grl(item.encoded_ego, gamma);
    auto pooled = LsaAdapter::pool(adapter.select(reversed));
    auto logit = adapter.discriminate(pooled, training, dropout_rng);
    auto loss = ad::bce_with_logits(
        logit, ad::Tensor({1}, {static_cast<double>(item.domain_label)}));
    total = total ? ad::add(total, loss) : loss;
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

CiaAdapter::CiaAdapter(int in_channels, int n_agent_types, const CiaConfig& cfg,
                       std::uint64_t seed, const std::string& name_prefix)
    : cfg_(cfg) {
  if (in_channels < 1 || n_agent_types < 1) throw std::invalid_argument("CiaAdapter: bad dims");
  if (cfg.hidden < 1) throw std::invalid_argument("CiaAdapter: bad hidden width");
  Rng rng(derive_seed(seed, "cia_init"));
  const int h = cfg.hidden;
  conv1_w_ = ad::parameter(name_prefix + ".conv1.w", he_normal({h, in_channels, 1, 1}, in_channels, rng));
  conv1_b_ = ad::parameter(name_prefix + ".conv1.b", ad::Tensor::full({h}, kPreReluBias));
  conv2_w_ = ad::parameter(name_prefix + ".conv2.w", he_normal({h, h, 1, 1}, h, rng));
  conv2_b_ = ad::parameter(name_prefix + ".conv2.b", ad::Tensor::full({h}, kPreReluBias));
  conv3_w_ = ad::parameter(name_prefix + ".conv3.w", he_normal({n_agent_types, h, 1, 1}, h, rng));
  conv3_b_ = ad::parameter(name_prefix + ".conv3.b", ad::Tensor({n_agent_types}));
}

ad::Value CiaAdapter::logits(const ad::Value& encoded) const {
  auto h1 = ad::relu(ad::conv2d(encoded, conv1_w_, conv1_b_, 1, 0));
  auto h2 = ad::relu(ad::conv2d(h1, conv2_w_, conv2_b_, 1, 0));
  return ad::conv2d(h2, conv3_w_, conv3_b_, 1, 0);
}

std::vector<ad::Value> CiaAdapter::params() const {
  return {conv1_w_, conv1_b_, conv2_w_, conv2_b_, conv3_w_, conv3_b_};
}

ad::Tensor cia_confidence_min(const std::vector<ad::Tensor>& conf_maps) {
  if (conf_maps.empty()) throw std::invalid_argument("cia_confidence_min: no maps");
  ad::Tensor out = conf_maps[0];
  for (std::size_t j = 1; j < conf_maps.size(); ++j) {
    if (!out.same_shape(conf_maps[j])) {
      throw std::invalid_argument("cia_confidence_min: shape mismatch");
    }
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], conf_maps[j][i]);
  }
  return out;
}

ad::Value cia_loss(const std::vector<CiaSample>& samples, const CiaAdapter& adapter, double gamma,
                   bool use_conf) {
  if (samples.empty()) throw std::invalid_argument("cia_loss: empty target batch");
  ad::Value total;
  for (const auto& s : samples) {
    if (s.agent_features.empty() || s.agent_features.size() != s.agent_labels.size()) {
      throw std::invalid_argument("cia_loss: malformed sample");
    }
    ad::Value sample_sum;
    for (std::size_t j = 0; j < s.agent_features.size(); ++j) {
      auto reversed = ad::grl(s.agent_features[j], gamma);
      auto ce = ad::softmax_ce_map(adapter.logits(reversed), s.agent_labels[j]);
      ad::Value weighted;
      if (use_conf) {
        if (!s.m_conf.same_shape(ce->val)) {
          throw std::invalid_argument("cia_loss: confidence map shape mismatch");
        }
        weighted = ad::mul_const(ce, s.m_conf);
      } else {
        weighted = ce;
      }
      auto cell_sum = ad::sum(weighted);
      sample_sum = sample_sum ? ad::add(sample_sum, cell_sum) : cell_sum;
    }
    auto normalized = ad::scale(sample_sum, 1.0 / static_cast<double>(s.agent_features.size()));
    total = total ? ad::add(total, normalized) : normalized;
  }
  return ad::scale(total, 1.0 / static_cast<double>(samples.size()));
}

}  // namespace coopadapt::adapters
