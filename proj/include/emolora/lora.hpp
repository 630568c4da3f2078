#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emolora/rng.hpp"
#include "emolora/tensor.hpp"

namespace emolora {

enum class LayerKind : std::uint8_t { linear = 0, conv1d = 1 };

const char* layer_kind_name(LayerKind kind);

// Low-rank update attached to one base layer: delta W = (alpha / rank) * B A
// with A [rank x d_in_eff] and B [d_out_eff x rank].
struct LoraPair {
    Param a;
    Param b;
    int rank = 0;
    float alpha = 0.0f;
    bool enabled = true;
    bool merged = false;

    double scale() const { return static_cast<double>(alpha) / static_cast<double>(rank); }
    std::size_t param_count() const { return a.size() + b.size(); }
};

// Standard deviation of the Gaussian used for A at attach time.
inline constexpr double kLoraInitStd = 0.02;

// Linear or same-padded 1-D convolution layer that can carry one LoRA pair.
//
// Both kinds share one code path: a conv kernel [out x in x k] is handled as
// the flattened weight [out x in*k] applied to the im2col unfold of the
// input, so the adapter for a conv layer factorizes that flattened matrix.
class AdaptableLayer {
public:
    static AdaptableLayer linear(std::size_t in, std::size_t out);
    static AdaptableLayer conv1d(std::size_t in, std::size_t out, std::size_t kernel);

    LayerKind kind() const { return kind_; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    std::size_t kernel_size() const { return kernel_; }
    std::size_t d_in_eff() const { return in_ * kernel_; }
    std::size_t d_out_eff() const { return out_; }
    // Base weights + bias.
    std::size_t base_param_count() const { return weight_.size() + bias_.size(); }

    Param& weight() { return weight_; }
    const Param& weight() const { return weight_; }
    Param& bias() { return bias_; }
    const Param& bias() const { return bias_; }

    // x [T x in] -> [T x out]. With no adapter, a disabled adapter, or a
    // merged adapter this is exactly the base computation on the current
    // weight.
    Tensor forward(const Tensor& x) const;
    // Accumulates gradients into every trainable param touched by forward(x)
    // and returns dL/dx. Frozen params are never written.
    Tensor backward(const Tensor& x, const Tensor& grad_out);

    bool adapted() const { return lora_.has_value(); }
    const std::optional<LoraPair>& lora() const { return lora_; }
    LoraPair& lora_pair();

    // A ~ N(0, 0.02^2) drawn from rng, B = 0, base frozen.
    void attach(int rank, float alpha, Rng& rng);
    // Attach with given factors (used when loading bundles).
    void attach(const Tensor& a, const Tensor& b, int rank, float alpha);
    // Removes the adapter and restores the base params' trainable flags.
    void detach();

    void set_enabled(bool enabled);
    void merge();
    void unmerge();

private:
    AdaptableLayer(LayerKind kind, std::size_t in, std::size_t out, std::size_t kernel);

    Tensor unfold(const Tensor& x) const;
    Tensor fold(const Tensor& cols) const;
    Tensor flat_weight() const;
    void check_rank(int rank) const;
    void install(LoraPair pair);
    // (alpha / r) * B A in double, [d_out_eff x d_in_eff].
    std::vector<double> delta() const;

    LayerKind kind_;
    std::size_t in_;
    std::size_t out_;
    std::size_t kernel_;
    Param weight_; // [out x in] or [out x in x k]
    Param bias_;   // [out]
    std::optional<LoraPair> lora_;
    bool saved_weight_trainable_ = true;
    bool saved_bias_trainable_ = true;
    std::vector<float> premerge_weight_;
};

} // namespace emolora
