#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "emolora/rng.hpp"
#include "emolora/ttsmodel.hpp"

namespace emolora {

// Adapter placement: which model modules receive LoRA on every linear and
// conv1d layer.
//   a text_encoder                 e duration_predictor
//   b flow                         f duration_predictor, text_encoder
//   c decoder                      g duration_predictor, flow, decoder
//   d flow, decoder                h duration_predictor, flow, decoder, projection
struct Scheme {
    char id;
    std::string_view caption;
    std::vector<std::string_view> modules;
};

inline constexpr std::array<char, 8> kSchemeIds = {'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'};

const Scheme& scheme(char id);
const std::vector<std::string_view>& modules_of(char id);
bool is_scheme_id(char id);
// Parses a single-letter id; anything else is a configuration error that
// lists the valid ids.
char parse_scheme_id(std::string_view text);

// True when `path` lies in one of the scheme's modules.
bool scheme_covers(char id, std::string_view path);

// Rank actually used on a layer: the requested rank capped by the layer's
// smaller effective dimension (the duration head has a single output).
int effective_rank(int rank, std::size_t d_in_eff, std::size_t d_out_eff);

// Alpha used on a layer whose rank was capped, chosen so the delta scale
// alpha / rank is the same on every adapted layer.
float effective_alpha(float alpha, int rank, int r_eff);

// Layers the scheme adapts, in model path order.
std::vector<LayerInfo> scheme_layers(const ToyModel& model, char id);

// Closed-form trainable count: sum over adapted layers of
// r_eff * (d_in_eff + d_out_eff).
std::size_t scheme_param_count(const ToyModel& model, char id, int rank);

// Freezes every base param and attaches LoRA(rank, alpha) to each covered
// layer, drawing A factors from `rng` in path order. Returns the adapted
// paths.
std::vector<std::string> apply_scheme(ToyModel& model, char id, int rank, float alpha, Rng& rng);

// Detaches every adapter on the model (none may be merged).
void detach_all(ToyModel& model);

// A/B params of enabled, unmerged adapters in path order.
std::vector<std::pair<std::string, Param*>> trainable_params(ToyModel& model);
std::size_t trainable_param_count(const ToyModel& model);

} // namespace emolora
