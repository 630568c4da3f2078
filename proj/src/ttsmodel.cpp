#include "emolora/ttsmodel.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <string>

#include <zlib.h>

#include "emolora/errors.hpp"
#include "emolora/numkern.hpp"

namespace emolora {

namespace {

// softplus(x) = 2.0
constexpr double kDurationBiasInit = 1.8545865;

void init_uniform(Param& p, double bound, Rng& rng) {
    for (float& v : p.value.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

void init_layer(AdaptableLayer& layer, double gain, Rng& rng) {
    init_uniform(layer.weight(), gain / std::sqrt(static_cast<double>(layer.d_in_eff())), rng);
}

Tensor columns(const Tensor& x, std::size_t start, std::size_t count) {
    Tensor out({x.rows(), count});
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t j = 0; j < count; ++j) out[r * count + j] = x.at(r, start + j);
    }
    return out;
}

void add_columns(Tensor& dst, std::size_t start, const Tensor& src) {
    const std::size_t count = src.cols();
    for (std::size_t r = 0; r < src.rows(); ++r) {
        for (std::size_t j = 0; j < count; ++j) dst.at(r, start + j) += src[r * count + j];
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

bool layer_trainable(const AdaptableLayer& l) {
    if (l.weight().trainable || l.bias().trainable) return true;
    const auto& p = l.lora();
    return p && p->enabled && !p->merged && (p->a.trainable || p->b.trainable);
}

std::uint32_t crc_floats(std::uint32_t crc, const std::vector<float>& data) {
    if constexpr (std::endian::native == std::endian::little) {
        return static_cast<std::uint32_t>(
            crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size() * sizeof(float))));
    } else {
        for (float f : data) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
            crc = static_cast<std::uint32_t>(crc32(crc, b, 4));
        }
        return crc;
    }
}

} // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab < 1) fail("vocab must be >= 1");
    if (hidden < 2 || hidden % 2 != 0) fail("hidden must be even and >= 2, got " + std::to_string(hidden));
    if (out_dim < 1) fail("out_dim must be >= 1");
    if (flow_layers < 0) fail("flow_layers must be >= 0");
    if (kernel < 1 || kernel % 2 == 0) fail("kernel must be odd, got " + std::to_string(kernel));
    if (max_duration < 1) fail("max_duration must be >= 1");
    if (pos_channels < 0 || pos_channels % 2 != 0) fail("pos_channels must be even and >= 0");
}

std::vector<int> frame_counts(const std::vector<float>& durations, int max_duration) {
    std::vector<int> frames(durations.size());
    for (std::size_t i = 0; i < durations.size(); ++i) {
        const double r = std::round(static_cast<double>(durations[i]));
        frames[i] = static_cast<int>(std::clamp(r, 1.0, static_cast<double>(max_duration)));
    }
    return frames;
}

Tensor expand_by_duration(const Tensor& h, const std::vector<int>& frames) {
    if (frames.size() != h.rows()) {
        throw InternalError("expand_by_duration: " + std::to_string(frames.size()) + " durations for " +
                            std::to_string(h.rows()) + " rows");
    }
    std::size_t total = 0;
    for (int f : frames) {
        if (f < 1) throw InternalError("expand_by_duration: duration " + std::to_string(f) + " < 1");
        total += static_cast<std::size_t>(f);
    }
    const std::size_t d = h.cols();
    Tensor out({total, d});
    std::size_t r = 0;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        for (int k = 0; k < frames[t]; ++k, ++r) {
            std::copy_n(h.data().begin() + static_cast<std::ptrdiff_t>(t * d), d,
                        out.data().begin() + static_cast<std::ptrdiff_t>(r * d));
        }
    }
    return out;
}

Tensor frame_positions(std::size_t frames, std::size_t channels) {
    Tensor pe({frames, std::max<std::size_t>(channels, 1)});
    if (channels == 0) return pe;
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t j = 0; j < channels / 2; ++j) {
            const double period = 4.0 * std::ldexp(1.0, static_cast<int>(j));
            const double w = 2.0 * std::numbers::pi * static_cast<double>(t) / period;
            pe.at(t, 2 * j) = static_cast<float>(std::sin(w));
            pe.at(t, 2 * j + 1) = static_cast<float>(std::cos(w));
        }
    }
    return pe;
}

ToyModel::ToyModel(const ModelConfig& cfg)
    : cfg_(cfg),
      te1_(AdaptableLayer::linear(cfg.hidden, cfg.hidden)),
      te2_(AdaptableLayer::linear(cfg.hidden, cfg.hidden)),
      dp1_(AdaptableLayer::linear(cfg.hidden, cfg.hidden)),
      dp2_(AdaptableLayer::linear(cfg.hidden, 1)),
      proj_(AdaptableLayer::linear(cfg.hidden, 2 * static_cast<std::size_t>(cfg.hidden))),
      dec1_(AdaptableLayer::conv1d(cfg.hidden + cfg.pos_channels, cfg.hidden, cfg.kernel)),
      dec2_(AdaptableLayer::conv1d(cfg.hidden, cfg.out_dim, cfg.kernel)) {
    embedding_ = Param(Tensor({static_cast<std::size_t>(cfg.vocab), static_cast<std::size_t>(cfg.hidden)}));
    const std::size_t half = static_cast<std::size_t>(cfg.hidden) / 2;
    for (int i = 0; i < cfg.flow_layers; ++i) {
        flow_.push_back(CouplingLayer{AdaptableLayer::linear(half, half), AdaptableLayer::linear(half, half),
                                      AdaptableLayer::linear(half, half), AdaptableLayer::linear(half, half)});
    }
}

ToyModel ToyModel::create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ToyModel m(cfg);
    Rng rng(seed);
    init_uniform(m.embedding_, 1.0, rng);
    init_layer(m.te1_, 1.5, rng);
    init_layer(m.te2_, 1.5, rng);
    init_layer(m.dp1_, 1.5, rng);
    init_layer(m.dp2_, 5.0, rng);
    m.dp2_.bias().value.fill(static_cast<float>(kDurationBiasInit));
    init_layer(m.proj_, 1.0, rng);
    for (auto& c : m.flow_) {
        init_layer(c.scale1, 1.0, rng);
        init_layer(c.scale2, 0.3, rng);
        init_layer(c.shift1, 1.0, rng);
        init_layer(c.shift2, 0.5, rng);
    }
    init_layer(m.dec1_, 1.5, rng);
    init_layer(m.dec2_, 1.0, rng);
    return m;
}

void ToyModel::check_tokens(const std::vector<int>& tokens) const {
    if (tokens.empty()) throw InputError("token sequence is empty");
    for (int t : tokens) {
        if (t < 0 || t >= cfg_.vocab) {
            throw InputError("token " + std::to_string(t) + " outside vocabulary [0, " + std::to_string(cfg_.vocab) +
                             ")");
        }
    }
}

Tensor ToyModel::embed(const std::vector<int>& tokens) const {
    const std::size_t d = static_cast<std::size_t>(cfg_.hidden);
    Tensor e({tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto row = embedding_.value.row(static_cast<std::size_t>(tokens[i]));
        std::copy(row.begin(), row.end(), e.row(i).begin());
    }
    return e;
}

std::pair<std::size_t, std::size_t> ToyModel::halves(std::size_t layer_index) const {
    const std::size_t half = static_cast<std::size_t>(cfg_.hidden) / 2;
    return layer_index % 2 == 0 ? std::pair{std::size_t{0}, half} : std::pair{half, std::size_t{0}};
}

Tensor ToyModel::coupling_forward(std::size_t i, const Tensor& x, Trace::Coupling* rec) const {
    const CouplingLayer& c = flow_[i];
    const std::size_t half = static_cast<std::size_t>(cfg_.hidden) / 2;
    const auto [c0, t0] = halves(i);
    Tensor cond = columns(x, c0, half);
    Tensor s_h = nk::tanh(c.scale1.forward(cond));
    Tensor s = c.scale2.forward(s_h);
    Tensor t_h = nk::tanh(c.shift1.forward(cond));
    const Tensor t = c.shift2.forward(t_h);
    Tensor y = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t j = 0; j < half; ++j) {
            const double e = std::exp(static_cast<double>(s.at(r, j)));
            if (!std::isfinite(e)) throw NumericError("flow coupling " + std::to_string(i) + ": non-finite scale");
            y.at(r, t0 + j) = static_cast<float>(static_cast<double>(x.at(r, t0 + j)) * e + t.at(r, j));
        }
    }
    if (rec) {
        rec->x = x;
        rec->cond = std::move(cond);
        rec->s_h = std::move(s_h);
        rec->s = std::move(s);
        rec->t_h = std::move(t_h);
    }
    return y;
}

Tensor ToyModel::coupling_inverse(std::size_t i, const Tensor& y) const {
    const CouplingLayer& c = flow_[i];
    const std::size_t half = static_cast<std::size_t>(cfg_.hidden) / 2;
    const auto [c0, t0] = halves(i);
    const Tensor cond = columns(y, c0, half);
    const Tensor s = c.scale2.forward(nk::tanh(c.scale1.forward(cond)));
    const Tensor t = c.shift2.forward(nk::tanh(c.shift1.forward(cond)));
    Tensor x = y;
    for (std::size_t r = 0; r < y.rows(); ++r) {
        for (std::size_t j = 0; j < half; ++j) {
            const double e = std::exp(-static_cast<double>(s.at(r, j)));
            if (!std::isfinite(e)) throw NumericError("flow coupling " + std::to_string(i) + ": non-finite scale");
            x.at(r, t0 + j) =
                static_cast<float>((static_cast<double>(y.at(r, t0 + j)) - static_cast<double>(t.at(r, j))) * e);
        }
    }
    return x;
}

Tensor ToyModel::flow_forward(const Tensor& z) const {
    if (z.rank() != 2 || z.cols() != static_cast<std::size_t>(cfg_.hidden)) {
        throw ShapeError("flow input must be [T x " + std::to_string(cfg_.hidden) + "], got " + z.shape_string());
    }
    Tensor x = z;
    for (std::size_t i = 0; i < flow_.size(); ++i) x = coupling_forward(i, x, nullptr);
    return x;
}

Tensor ToyModel::flow_inverse(const Tensor& a) const {
    if (a.rank() != 2 || a.cols() != static_cast<std::size_t>(cfg_.hidden)) {
        throw ShapeError("flow input must be [T x " + std::to_string(cfg_.hidden) + "], got " + a.shape_string());
    }
    Tensor x = a;
    for (std::size_t i = flow_.size(); i-- > 0;) x = coupling_inverse(i, x);
    return x;
}

Trace ToyModel::run(const std::vector<int>& tokens, const std::vector<int>* forced_frames, SynthMode mode,
                    Rng* rng) const {
    check_tokens(tokens);
    const std::size_t d = static_cast<std::size_t>(cfg_.hidden);
    Trace tr;
    tr.tokens = tokens;
    tr.emb = embed(tokens);
    tr.te_h1 = nk::tanh(te1_.forward(tr.emb));
    tr.h = nk::tanh(te2_.forward(tr.te_h1));

    tr.dp_pre1 = dp1_.forward(tr.h);
    tr.dp_h1 = nk::relu(tr.dp_pre1);
    tr.dp_raw = dp2_.forward(tr.dp_h1);
    SynthOutput& out = tr.out;
    out.durations = nk::softplus(tr.dp_raw).data();
    if (forced_frames) {
        if (forced_frames->size() != tokens.size()) {
            throw InputError("forced frame grid has " + std::to_string(forced_frames->size()) + " entries for " +
                             std::to_string(tokens.size()) + " tokens");
        }
        out.frames = *forced_frames;
    } else {
        out.frames = frame_counts(out.durations, cfg_.max_duration);
    }
    tr.frames = out.frames;

    tr.expanded = expand_by_duration(tr.h, out.frames);
    const Tensor p = proj_.forward(tr.expanded);
    out.mu = columns(p, 0, d);
    out.logvar = columns(p, d, d);

    Tensor z = out.mu;
    if (mode == SynthMode::sampled) {
        if (!rng) throw InputError("sampled synthesis needs a random generator");
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double sd = std::exp(0.5 * static_cast<double>(out.logvar[i]));
            z[i] = static_cast<float>(static_cast<double>(z[i]) + sd * rng->normal());
        }
    }

    tr.flow.resize(flow_.size());
    Tensor x = std::move(z);
    for (std::size_t i = 0; i < flow_.size(); ++i) x = coupling_forward(i, x, &tr.flow[i]);
    out.acoustic = std::move(x);

    const std::size_t frames = out.acoustic.rows();
    const std::size_t pc = static_cast<std::size_t>(cfg_.pos_channels);
    tr.dec_in = Tensor({frames, d + pc});
    const Tensor pe = frame_positions(frames, pc);
    for (std::size_t r = 0; r < frames; ++r) {
        auto dst = tr.dec_in.row(r);
        const auto a = out.acoustic.row(r);
        std::copy(a.begin(), a.end(), dst.begin());
        for (std::size_t j = 0; j < pc; ++j) dst[d + j] = pe.at(r, j);
    }
    tr.dec_pre1 = dec1_.forward(tr.dec_in);
    tr.dec_h1 = nk::relu(tr.dec_pre1);
    out.output = dec2_.forward(tr.dec_h1);
    tr.recorded = true;
    return tr;
}

SynthOutput ToyModel::forward(const std::vector<int>& tokens, SynthMode mode, Rng* rng) const {
    return run(tokens, nullptr, mode, rng).out;
}

SynthOutput ToyModel::forward_with_frames(const std::vector<int>& tokens, const std::vector<int>& frames) const {
    return run(tokens, &frames, SynthMode::deterministic, nullptr).out;
}

Trace ToyModel::forward_train(const std::vector<int>& tokens, const std::vector<int>& frames) const {
    return run(tokens, &frames, SynthMode::deterministic, nullptr);
}

void ToyModel::backward(Trace& tr, const Tensor& grad_output, const std::vector<float>& grad_durations) {
    if (!tr.recorded) throw StateError("backward called without a recorded forward pass");
    if (grad_output.shape() != tr.out.output.shape()) {
        throw ShapeError("output gradient " + grad_output.shape_string() + " does not match output " +
                         tr.out.output.shape_string());
    }
    if (grad_durations.size() != tr.tokens.size()) {
        throw ShapeError("duration gradient has " + std::to_string(grad_durations.size()) + " entries for " +
                         std::to_string(tr.tokens.size()) + " tokens");
    }
    tr.recorded = false;

    const std::size_t d = static_cast<std::size_t>(cfg_.hidden);
    const std::size_t half = d / 2;

    const bool te_train = embedding_.trainable || layer_trainable(te1_) || layer_trainable(te2_);
    const bool dp_train = layer_trainable(dp1_) || layer_trainable(dp2_);
    const bool proj_train = layer_trainable(proj_);
    bool flow_train = false;
    for (const auto& c : flow_) {
        flow_train = flow_train || layer_trainable(c.scale1) || layer_trainable(c.scale2) ||
                     layer_trainable(c.shift1) || layer_trainable(c.shift2);
    }
    const bool dec_train = layer_trainable(dec1_) || layer_trainable(dec2_);

    const bool need_proj = proj_train || te_train;
    const bool need_flow = flow_train || need_proj;
    Tensor g_h({tr.tokens.size(), d});

    if (dec_train || need_flow) {
        const Tensor g_h1 = dec2_.backward(tr.dec_h1, grad_output);
        const Tensor g_in = dec1_.backward(tr.dec_in, nk::relu_backward(tr.dec_pre1, g_h1));
        if (need_flow) {
            Tensor g = columns(g_in, 0, d);
            for (std::size_t i = flow_.size(); i-- > 0;) {
                CouplingLayer& c = flow_[i];
                const Trace::Coupling& rec = tr.flow[i];
                const auto [c0, t0] = halves(i);
                Tensor g_s({g.rows(), half}), g_t({g.rows(), half});
                Tensor g_x = g;
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t j = 0; j < half; ++j) {
                        const double gy = g.at(r, t0 + j);
                        const double e = std::exp(static_cast<double>(rec.s.at(r, j)));
                        g_x.at(r, t0 + j) = static_cast<float>(gy * e);
                        g_s.at(r, j) = static_cast<float>(gy * static_cast<double>(rec.x.at(r, t0 + j)) * e);
                        g_t.at(r, j) = static_cast<float>(gy);
                    }
                }
                const Tensor g_cond_s =
                    c.scale1.backward(rec.cond, nk::tanh_backward(rec.s_h, c.scale2.backward(rec.s_h, g_s)));
                const Tensor g_cond_t =
                    c.shift1.backward(rec.cond, nk::tanh_backward(rec.t_h, c.shift2.backward(rec.t_h, g_t)));
                add_columns(g_x, c0, add(g_cond_s, g_cond_t));
                g = std::move(g_x);
            }
            if (need_proj) {
                Tensor g_p({g.rows(), 2 * d});
                add_columns(g_p, 0, g);
                const Tensor g_exp = proj_.backward(tr.expanded, g_p);
                if (te_train) {
                    std::size_t r = 0;
                    for (std::size_t t = 0; t < tr.frames.size(); ++t) {
                        for (int k = 0; k < tr.frames[t]; ++k, ++r) {
                            for (std::size_t j = 0; j < d; ++j) g_h.at(t, j) += g_exp.at(r, j);
                        }
                    }
                }
            }
        }
    }

    if (dp_train || te_train) {
        Tensor g_dur({tr.tokens.size(), std::size_t{1}}, std::vector<float>(grad_durations));
        const Tensor g_raw = nk::softplus_backward(tr.dp_raw, g_dur);
        const Tensor g_dp_h1 = dp2_.backward(tr.dp_h1, g_raw);
        const Tensor g_from_dp = dp1_.backward(tr.h, nk::relu_backward(tr.dp_pre1, g_dp_h1));
        if (te_train) {
            for (std::size_t i = 0; i < g_h.size(); ++i) g_h[i] += g_from_dp[i];
        }
    }

    if (te_train) {
        const Tensor g_te_h1 = te2_.backward(tr.te_h1, nk::tanh_backward(tr.h, g_h));
        const Tensor g_emb = te1_.backward(tr.emb, nk::tanh_backward(tr.te_h1, g_te_h1));
        if (embedding_.trainable) {
            for (std::size_t i = 0; i < tr.tokens.size(); ++i) {
                auto dst = embedding_.grad.row(static_cast<std::size_t>(tr.tokens[i]));
                const auto src = g_emb.row(i);
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        }
    }
}

std::vector<std::pair<std::string, AdaptableLayer*>> ToyModel::layers() {
    std::vector<std::pair<std::string, AdaptableLayer*>> out;
    out.emplace_back("text_encoder.lin1", &te1_);
    out.emplace_back("text_encoder.lin2", &te2_);
    out.emplace_back("duration_predictor.lin1", &dp1_);
    out.emplace_back("duration_predictor.lin2", &dp2_);
    out.emplace_back("projection.lin", &proj_);
    for (std::size_t i = 0; i < flow_.size(); ++i) {
        const std::string base = "flow.cpl" + std::to_string(i);
        out.emplace_back(base + ".scale.lin1", &flow_[i].scale1);
        out.emplace_back(base + ".scale.lin2", &flow_[i].scale2);
        out.emplace_back(base + ".shift.lin1", &flow_[i].shift1);
        out.emplace_back(base + ".shift.lin2", &flow_[i].shift2);
    }
    out.emplace_back("decoder.conv1", &dec1_);
    out.emplace_back("decoder.conv2", &dec2_);
    return out;
}

std::vector<std::pair<std::string, const AdaptableLayer*>> ToyModel::layers() const {
    std::vector<std::pair<std::string, const AdaptableLayer*>> out;
    for (auto& [path, l] : const_cast<ToyModel*>(this)->layers()) out.emplace_back(path, l);
    return out;
}

std::vector<LayerInfo> ToyModel::layer_paths() const {
    std::vector<LayerInfo> info;
    for (const auto& [path, l] : layers()) {
        info.push_back(LayerInfo{path, l->kind(), l->in_features(), l->out_features(), l->kernel_size(),
                                 l->d_in_eff(), l->d_out_eff()});
    }
    return info;
}

AdaptableLayer& ToyModel::layer(std::string_view path) {
    for (auto& [p, l] : layers()) {
        if (p == path) return *l;
    }
    throw LookupError("no layer at path '" + std::string(path) + "'");
}

const AdaptableLayer& ToyModel::layer(std::string_view path) const {
    return const_cast<ToyModel*>(this)->layer(path);
}

bool ToyModel::has_layer(std::string_view path) const {
    for (const auto& [p, l] : layers()) {
        if (p == path) return true;
    }
    return false;
}

std::vector<std::pair<std::string, Param*>> ToyModel::base_params() {
    std::vector<std::pair<std::string, Param*>> out;
    out.emplace_back("text_encoder.embedding", &embedding_);
    for (auto& [path, l] : layers()) {
        out.emplace_back(path + ".weight", &l->weight());
        out.emplace_back(path + ".bias", &l->bias());
    }
    return out;
}

std::vector<std::pair<std::string, const Param*>> ToyModel::base_params() const {
    std::vector<std::pair<std::string, const Param*>> out;
    for (auto& [path, p] : const_cast<ToyModel*>(this)->base_params()) out.emplace_back(path, p);
    return out;
}

std::size_t ToyModel::base_param_count() const {
    std::size_t n = 0;
    for (const auto& [path, p] : base_params()) n += p->size();
    return n;
}

void ToyModel::set_base_trainable(bool trainable) {
    for (auto& [path, p] : base_params()) {
        p->trainable = trainable;
        if (!trainable) p->zero_grad();
    }
}

std::uint32_t ToyModel::base_checksum() const {
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
    for (const auto& [path, p] : base_params()) crc = crc_floats(crc, p->value.data());
    return crc;
}

bool ToyModel::has_adapters() const {
    for (const auto& [path, l] : layers()) {
        if (l->adapted()) return true;
    }
    return false;
}

void ToyModel::zero_grad() {
    for (auto& [path, p] : base_params()) p->zero_grad();
    for (auto& [path, l] : layers()) {
        if (l->adapted()) {
            l->lora_pair().a.zero_grad();
            l->lora_pair().b.zero_grad();
        }
    }
}

} // namespace emolora
