#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "dehaze/layers.hpp"

namespace dehaze {

struct AttentionSpec {
  int channels = 0;
  double key_channel_ratio = 1.0 / 8.0;
  double gate_init = 0.0;
  std::size_t memory_budget_bytes = std::size_t{256} << 20;  // for the [N, HW, HW] score tensor

  int key_channels() const { return std::max(1, static_cast<int>(channels * key_channel_ratio)); }
};

/// Non-local self-attention over spatial positions:
///   y = x + gate * V softmax(Q^T K)^T
/// with 1x1 projections Q, K (reduced channels) and V (full channels).
template <typename T>
class SelfAttention : public Module<T> {
 public:
  SelfAttention() = default;
  SelfAttention(AttentionSpec spec, Rng& rng) : spec_(spec) {
    if (spec.channels <= 0) throw ConfigError("attention: channels must be positive");
    const int ck = spec.key_channels();
    query_ = Conv2d<T>({spec.channels, ck, 1, 1, 0}, rng);
    key_ = Conv2d<T>({spec.channels, ck, 1, 1, 0}, rng);
    value_ = Conv2d<T>({spec.channels, spec.channels, 1, 1, 0}, rng);
    gate_ = Var<T>::parameter(Tensor<T>::scalar(static_cast<T>(spec.gate_init)));
  }

  /// Row-stochastic attention matrix [N, HW, HW]; row i holds the weights of query position i.
  Var<T> attention_weights(const Var<T>& x) const {
    check_capacity(x);
    const int n = x.dim(0), hw = x.dim(2) * x.dim(3), ck = spec_.key_channels();
    Var<T> q = reshape(query_.forward(x), {n, ck, hw});
    Var<T> k = reshape(key_.forward(x), {n, ck, hw});
    return softmax_last(bmm(q, k, true, false));
  }

  Var<T> forward(const Var<T>& x) const {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (c != spec_.channels) throw ValidationError("attention: channel mismatch");
    Var<T> beta = attention_weights(x);
    Var<T> v = reshape(value_.forward(x), {n, c, hw});
    Var<T> o = reshape(bmm(v, beta, false, true), x.shape());
    return add(x, scale_by(o, gate_));
  }

  void collect(const std::string& prefix, std::vector<TensorRef<T>>& out) override {
    query_.collect(join_name(prefix, "query"), out);
    key_.collect(join_name(prefix, "key"), out);
    value_.collect(join_name(prefix, "value"), out);
    out.push_back({join_name(prefix, "gate"), &gate_.mutable_value(), &gate_});
  }

  LayerInfo describe(const std::string& name, int h, int w) const {
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const int c = spec_.channels, ck = spec_.key_channels();
    LayerInfo info{name, LayerKind::attention, 0, 0, 0, false};
    for (const auto* conv : {&query_, &key_, &value_}) {
      auto li = conv->describe(name, h, w);
      info.params += li.params;
      info.flops += li.flops;
    }
    info.params += 1;
    info.flops += 2 * hw * hw * ck + 2 * hw * hw * c;
    return info;
  }

  Var<T>& gate() { return gate_; }
  Conv2d<T>& query() { return query_; }
  Conv2d<T>& key() { return key_; }
  Conv2d<T>& value() { return value_; }
  const AttentionSpec& spec() const { return spec_; }

 private:
  void check_capacity(const Var<T>& x) const {
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t bytes = static_cast<std::size_t>(x.dim(0)) * hw * hw * sizeof(T);
    if (bytes > spec_.memory_budget_bytes)
      throw CapacityError("attention over " + std::to_string(hw) + " positions needs " + std::to_string(bytes) +
                          " bytes for scores, budget is " + std::to_string(spec_.memory_budget_bytes));
  }

  AttentionSpec spec_;
  Conv2d<T> query_;
  Conv2d<T> key_;
  Conv2d<T> value_;
  Var<T> gate_;
};

}  // namespace dehaze
