#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emolora/lora.hpp"
#include "emolora/rng.hpp"
#include "emolora/tensor.hpp"

namespace emolora {

struct ModelConfig {
    int vocab = 64;
    int hidden = 32;       // d; must be even for the coupling split
    int out_dim = 16;      // m
    int flow_layers = 2;   // K coupling layers
    int kernel = 3;        // decoder conv kernel, odd
    int max_duration = 4;  // frames per token after clamping
    int pos_channels = 8;  // frame-position features fed to the decoder, even

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class SynthMode { deterministic, sampled };

// Module names, in pipeline order. Layer paths start with one of these.
inline constexpr std::string_view kTextEncoder = "text_encoder";
inline constexpr std::string_view kDurationPredictor = "duration_predictor";
inline constexpr std::string_view kProjection = "projection";
inline constexpr std::string_view kFlow = "flow";
inline constexpr std::string_view kDecoder = "decoder";

struct LayerInfo {
    std::string path;
    LayerKind kind;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 1;
    std::size_t d_in_eff = 0;
    std::size_t d_out_eff = 0;
};

struct SynthOutput {
    std::vector<float> durations; // predicted per-token durations (softplus output, unclamped)
    std::vector<int> frames;      // clamp(round(duration), 1, max_duration)
    Tensor mu;                    // [T_frames x d]
    Tensor logvar;                // [T_frames x d]
    Tensor acoustic;              // flow output, [T_frames x d]
    Tensor output;                // [T_frames x m]
};

// Intermediate activations of one recorded forward pass. Consumed by
// ToyModel::backward.
struct Trace {
    bool recorded = false;
    std::vector<int> tokens;
    std::vector<int> frames;
    Tensor emb, te_h1, h;
    Tensor dp_pre1, dp_h1, dp_raw;
    Tensor expanded;
    struct Coupling {
        Tensor x;       // layer input
        Tensor cond;    // conditioning half
        Tensor s_h, s;  // scale net hidden (tanh output) and log-scale
        Tensor t_h;     // shift net hidden
    };
    std::vector<Coupling> flow;
    Tensor dec_in, dec_pre1, dec_h1;
    SynthOutput out;
};

// Rounds and clamps continuous durations into frame counts.
std::vector<int> frame_counts(const std::vector<float>& durations, int max_duration);

// Repeats row t of h frames[t] times.
Tensor expand_by_duration(const Tensor& h, const std::vector<int>& frames);

// Fixed frame-position features [T x channels]: channel pair j holds
// sin / cos of 2*pi*t / (4 * 2^j).
Tensor frame_positions(std::size_t frames, std::size_t channels);

// Five-module synthesizer: text encoder, duration predictor, projection,
// affine-coupling flow and convolutional decoder. Values are copyable; a
// copy carries its adapters along.
class ToyModel {
public:
    // Random initialization from `seed`. All base params start trainable.
    static ToyModel create(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    SynthOutput forward(const std::vector<int>& tokens, SynthMode mode = SynthMode::deterministic,
                        Rng* rng = nullptr) const;
    // Deterministic forward with the frame grid forced to `frames`.
    SynthOutput forward_with_frames(const std::vector<int>& tokens, const std::vector<int>& frames) const;

    // Deterministic forward on a forced frame grid that keeps what backward needs.
    Trace forward_train(const std::vector<int>& tokens, const std::vector<int>& frames) const;
    // Accumulates gradients of a loss whose partials w.r.t. the output
    // features and the predicted durations are given. Consumes the trace.
    void backward(Trace& trace, const Tensor& grad_output, const std::vector<float>& grad_durations);

    Tensor flow_forward(const Tensor& z) const;
    Tensor flow_inverse(const Tensor& a) const;

    std::vector<LayerInfo> layer_paths() const;
    std::vector<std::pair<std::string, AdaptableLayer*>> layers();
    std::vector<std::pair<std::string, const AdaptableLayer*>> layers() const;
    AdaptableLayer& layer(std::string_view path);
    const AdaptableLayer& layer(std::string_view path) const;
    bool has_layer(std::string_view path) const;

    Param& embedding() { return embedding_; }
    const Param& embedding() const { return embedding_; }

    // Embedding plus every layer's weight and bias, in path order.
    std::vector<std::pair<std::string, Param*>> base_params();
    std::vector<std::pair<std::string, const Param*>> base_params() const;
    std::size_t base_param_count() const;
    void set_base_trainable(bool trainable);
    // CRC32 over the little-endian bytes of base_params() in order.
    std::uint32_t base_checksum() const;

    bool has_adapters() const;
    bool pretrained() const { return pretrained_; }
    void set_pretrained(bool p) { pretrained_ = p; }

    void zero_grad();

private:
    explicit ToyModel(const ModelConfig& cfg);

    struct CouplingLayer {
        AdaptableLayer scale1, scale2, shift1, shift2;
    };

    void check_tokens(const std::vector<int>& tokens) const;
    Tensor embed(const std::vector<int>& tokens) const;
    Trace run(const std::vector<int>& tokens, const std::vector<int>* forced_frames, SynthMode mode,
              Rng* rng) const;
    std::pair<std::size_t, std::size_t> halves(std::size_t layer_index) const;
    Tensor coupling_forward(std::size_t i, const Tensor& x, Trace::Coupling* rec) const;
    Tensor coupling_inverse(std::size_t i, const Tensor& y) const;

    ModelConfig cfg_;
    Param embedding_;
    AdaptableLayer te1_, te2_;
    AdaptableLayer dp1_, dp2_;
    AdaptableLayer proj_;
    std::vector<CouplingLayer> flow_;
    AdaptableLayer dec1_, dec2_;
    bool pretrained_ = false;
};

} // namespace emolora
