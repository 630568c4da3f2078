#include "emolora/schemes.hpp"

#include <algorithm>

#include "emolora/errors.hpp"

namespace emolora {

namespace {

// Single source of truth for the placement table.
const std::array<Scheme, 8>& scheme_table() {
    static const std::array<Scheme, 8> table = {{
        {'a', "Text information modeling", {kTextEncoder}},
        {'b', "Distribution transformation", {kFlow}},
        {'c', "Decode", {kDecoder}},
        {'d', "Acoustic information modeling", {kFlow, kDecoder}},
        {'e', "Duration", {kDurationPredictor}},
        {'f', "Duration and text information", {kDurationPredictor, kTextEncoder}},
        {'g', "Duration and acoustic information", {kDurationPredictor, kFlow, kDecoder}},
        {'h', "Duration, acoustic information and projection", {kDurationPredictor, kFlow, kDecoder, kProjection}},
    }};
    return table;
}

} // namespace

bool is_scheme_id(char id) { return id >= 'a' && id <= 'h'; }

const Scheme& scheme(char id) {
    if (!is_scheme_id(id)) {
        throw ConfigError(std::string("unknown scheme '") + id + "'; valid ids are a, b, c, d, e, f, g, h");
    }
    return scheme_table()[static_cast<std::size_t>(id - 'a')];
}

const std::vector<std::string_view>& modules_of(char id) { return scheme(id).modules; }

char parse_scheme_id(std::string_view text) {
    if (text.size() != 1 || !is_scheme_id(text[0])) {
        throw ConfigError("unknown scheme '" + std::string(text) + "'; valid ids are a, b, c, d, e, f, g, h");
    }
    return text[0];
}

bool scheme_covers(char id, std::string_view path) {
    for (std::string_view module : modules_of(id)) {
        if (path.size() > module.size() && path.substr(0, module.size()) == module && path[module.size()] == '.') {
            return true;
        }
    }
    return false;
}

int effective_rank(int rank, std::size_t d_in_eff, std::size_t d_out_eff) {
    return std::min<int>(rank, static_cast<int>(std::min(d_in_eff, d_out_eff)));
}

float effective_alpha(float alpha, int rank, int r_eff) {
    return r_eff == rank ? alpha : static_cast<float>(static_cast<double>(alpha) * r_eff / rank);
}

std::vector<LayerInfo> scheme_layers(const ToyModel& model, char id) {
    std::vector<LayerInfo> out;
    for (const LayerInfo& info : model.layer_paths()) {
        if (scheme_covers(id, info.path)) out.push_back(info);
    }
    return out;
}

std::size_t scheme_param_count(const ToyModel& model, char id, int rank) {
    std::size_t n = 0;
    for (const LayerInfo& info : scheme_layers(model, id)) {
        const auto r = static_cast<std::size_t>(effective_rank(rank, info.d_in_eff, info.d_out_eff));
        n += r * (info.d_in_eff + info.d_out_eff);
    }
    return n;
}

std::vector<std::string> apply_scheme(ToyModel& model, char id, int rank, float alpha, Rng& rng) {
    scheme(id);
    if (model.has_adapters()) throw StateError("apply_scheme: model already carries adapters");
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1, got " + std::to_string(rank));
    model.set_base_trainable(false);
    std::vector<std::string> paths;
    for (auto& [path, layer] : model.layers()) {
        if (!scheme_covers(id, path)) continue;
        const int r = effective_rank(rank, layer->d_in_eff(), layer->d_out_eff());
        layer->attach(r, effective_alpha(alpha, rank, r), rng);
        paths.push_back(path);
    }
    return paths;
}

void detach_all(ToyModel& model) {
    for (auto& [path, layer] : model.layers()) {
        if (layer->adapted()) layer->detach();
    }
}

std::vector<std::pair<std::string, Param*>> trainable_params(ToyModel& model) {
    std::vector<std::pair<std::string, Param*>> out;
    for (auto& [path, layer] : model.layers()) {
        if (!layer->adapted()) continue;
        LoraPair& p = layer->lora_pair();
        if (!p.enabled || p.merged) continue;
        out.emplace_back(path + ".lora_a", &p.a);
        out.emplace_back(path + ".lora_b", &p.b);
    }
    return out;
}

std::size_t trainable_param_count(const ToyModel& model) {
    std::size_t n = 0;
    for (auto& [path, p] : trainable_params(const_cast<ToyModel&>(model))) n += p->size();
    return n;
}

} // namespace emolora
