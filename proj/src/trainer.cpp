#include "emolora/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "emolora/errors.hpp"
#include "emolora/rng.hpp"
#include "emolora/schemes.hpp"

namespace emolora {

namespace {

// Stream ids for Rng::split so the batch order and the adapter init never
// share a stream.
constexpr std::uint64_t kBatchStream = 1;
constexpr std::uint64_t kAdapterInitStream = 2;

std::string shortest(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<Param*> param_ptrs(const std::vector<std::pair<std::string, Param*>>& named) {
    std::vector<Param*> out;
    out.reserve(named.size());
    for (const auto& [name, p] : named) out.push_back(p);
    return out;
}

double dataset_loss(const ToyModel& model, const std::vector<Sample>& data, const TrainConfig& cfg) {
    if (data.empty()) return 0.0;
    double sum = 0.0;
    for (const Sample& s : data) sum += sample_loss(model, s, cfg);
    return sum / static_cast<double>(data.size());
}

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Loss terms and their gradients for one teacher-forced pass.
struct LossParts {
    double loss = 0.0;
    Tensor grad_output;
    std::vector<float> grad_durations;
};

LossParts loss_parts(const SynthOutput& out, const Sample& s, const TrainConfig& cfg, double weight) {
    if (out.output.shape() != s.output.shape()) {
        throw ShapeError("sample output target " + s.output.shape_string() + " does not match model output " +
                         out.output.shape_string());
    }
    if (out.durations.size() != s.durations.size()) throw ShapeError("duration target length mismatch");

    LossParts p;
    const std::size_t n = s.output.size();
    p.grad_output = Tensor(s.output.shape());
    double out_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double diff = static_cast<double>(out.output[i]) - static_cast<double>(s.output[i]);
        out_sq += diff * diff;
        p.grad_output[i] = static_cast<float>(weight * cfg.lambda_out * 2.0 * diff / static_cast<double>(n));
    }
    const std::size_t t = s.durations.size();
    p.grad_durations.resize(t);
    double dur_sq = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        const double pred = out.durations[i];
        const double diff = std::log(pred) - std::log(static_cast<double>(s.durations[i]));
        dur_sq += diff * diff;
        p.grad_durations[i] = static_cast<float>(weight * cfg.lambda_dur * 2.0 * diff / (static_cast<double>(t) * pred));
    }
    p.loss = cfg.lambda_out * out_sq / static_cast<double>(n) + cfg.lambda_dur * dur_sq / static_cast<double>(t);
    return p;
}

} // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
    if (steps < 0) throw ConfigError("steps must be >= 0, got " + std::to_string(steps));
    if (batch < 1) throw ConfigError("batch must be >= 1, got " + std::to_string(batch));
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (lambda_out < 0.0 || lambda_dur < 0.0) throw ConfigError("loss weights must be >= 0");
}

void Adam::step(const std::vector<Param*>& params) {
    if (m_.empty()) {
        for (const Param* p : params) {
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }
    if (m_.size() != params.size()) throw StateError("Adam::step called with a different parameter list");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Param& p = *params[k];
        if (p.size() != m_[k].size()) throw StateError("Adam::step parameter size changed");
        auto& m = m_[k];
        auto& v = v_[k];
        auto& val = p.value.data();
        const auto& g = p.grad.data();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double gi = g[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            val[i] = static_cast<float>(static_cast<double>(val[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

std::vector<Sample> teacher_targets(const ToyModel& teacher, const CorpusOptions& options) {
    const ModelConfig& cfg = teacher.config();
    options.validate(cfg.vocab);
    const Rng root(options.seed);
    const auto span = static_cast<std::uint32_t>(options.max_len - options.min_len + 1);
    std::vector<Sample> out;
    for (int i = 0; i < options.utterances; ++i) {
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        Sample s;
        const int len = options.min_len + static_cast<int>(rng.below(span));
        for (int t = 0; t < len; ++t) s.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.vocab))));
        SynthOutput o = teacher.forward(s.tokens);
        s.frames = std::move(o.frames);
        s.durations = std::move(o.durations);
        s.output = std::move(o.output);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> emotion_samples(const EmotionCorpus& corpus, Emotion e) {
    std::vector<Sample> out;
    for (std::size_t i : corpus.train_indices()) {
        const Utterance& u = corpus.utterances[i];
        const EmotionTarget& t = u.target(e);
        Sample s;
        s.tokens = u.tokens;
        s.frames = t.frames;
        s.durations.assign(t.frames.begin(), t.frames.end());
        s.output = t.output;
        out.push_back(std::move(s));
    }
    return out;
}

double sample_loss(const ToyModel& model, const Sample& s, const TrainConfig& cfg) {
    const SynthOutput out = model.forward_with_frames(s.tokens, s.frames);
    return loss_parts(out, s, cfg, 1.0).loss;
}

double accumulate_gradients(ToyModel& model, const Sample& s, const TrainConfig& cfg, double weight) {
    Trace tr = model.forward_train(s.tokens, s.frames);
    LossParts p = loss_parts(tr.out, s, cfg, weight);
    model.backward(tr, p.grad_output, p.grad_durations);
    return p.loss;
}

LossCurve train_params(ToyModel& model, const std::vector<Param*>& params, const std::vector<Sample>& data,
                       const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw InputError("training data is empty");
    Adam opt(cfg);
    Rng rng = Rng(cfg.seed).split(kBatchStream);
    LossCurve curve;
    curve.loss.reserve(static_cast<std::size_t>(cfg.steps) + 1);
    const double weight = 1.0 / static_cast<double>(cfg.batch);
    for (int step = 0; step < cfg.steps; ++step) {
        model.zero_grad();
        double loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const Sample& s = data[rng.below(static_cast<std::uint32_t>(data.size()))];
            try {
                loss += accumulate_gradients(model, s, cfg, weight);
            } catch (const NumericError& e) {
                throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
            }
        }
        loss *= weight;
        if (!std::isfinite(loss)) throw TrainingError("loss became non-finite at step " + std::to_string(step));
        curve.loss.push_back(loss);
        opt.step(params);
    }
    double final_loss = 0.0;
    try {
        final_loss = dataset_loss(model, data, cfg);
    } catch (const NumericError& e) {
        throw TrainingError("training diverged at step " + std::to_string(cfg.steps) + ": " + e.what());
    }
    if (!std::isfinite(final_loss)) {
        throw TrainingError("loss became non-finite at step " + std::to_string(cfg.steps));
    }
    curve.loss.push_back(final_loss);
    model.zero_grad();
    return curve;
}

LossCurve pretrain_base(ToyModel& model, const std::vector<Sample>& teacher, const TrainConfig& cfg) {
    if (model.has_adapters()) throw StateError("pretrain_base: model carries adapters");
    model.set_base_trainable(true);
    LossCurve curve = train_params(model, param_ptrs(model.base_params()), teacher, cfg);
    model.set_base_trainable(false);
    model.set_pretrained(true);
    return curve;
}

float default_alpha(int rank) { return static_cast<float>(rank); }

AdapterRun train_adapter(const ToyModel& base, char scheme_id, Emotion emotion, const EmotionCorpus& corpus, int rank,
                         float alpha, const TrainConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    scheme(scheme_id);
    cfg.validate();
    if (!base.pretrained()) throw StateError("train_adapter: base model is not pretrained");
    if (base.has_adapters()) throw StateError("train_adapter: base model already carries adapters");
    const std::uint32_t crc = base.base_checksum();
    if (corpus.base_checksum != crc) throw CompatibilityError("train_adapter: corpus was generated from a different base");

    ToyModel model = base;
    Rng init = Rng(cfg.seed).split(kAdapterInitStream);
    apply_scheme(model, scheme_id, rank, alpha, init);
    const LossCurve curve = train_params(model, param_ptrs(trainable_params(model)), emotion_samples(corpus, emotion), cfg);
    if (model.base_checksum() != crc) throw InternalError("train_adapter: base weights changed during adapter training");

    AdapterRun run;
    run.bundle = extract_bundle(model, std::string(emotion_name(emotion)), scheme_id, rank, alpha);
    RunReport& r = run.report;
    r.kind = "adapter";
    r.scheme = scheme_id;
    r.rank = rank;
    r.alpha = alpha;
    r.emotion = emotion;
    r.steps = cfg.steps;
    r.final_loss = curve.loss.back();
    r.match_rate[emotion] = match_rate(model, emotion, corpus);
    r.param_count = trainable_param_count(model);
    r.wall_seconds = elapsed_seconds(start);
    return run;
}

FineTuneRun fine_tune_full(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus,
                           const TrainConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    cfg.validate();
    if (!base.pretrained()) throw StateError("fine_tune_full: base model is not pretrained");
    if (base.has_adapters()) throw StateError("fine_tune_full: base model carries adapters");
    if (corpus.base_checksum != base.base_checksum()) {
        throw CompatibilityError("fine_tune_full: corpus was generated from a different base");
    }
    FineTuneRun run{base, {}};
    ToyModel& model = run.model;
    model.set_base_trainable(true);
    const LossCurve curve = train_params(model, param_ptrs(model.base_params()), emotion_samples(corpus, emotion), cfg);
    model.set_base_trainable(false);

    RunReport& r = run.report;
    r.kind = "finetune";
    r.emotion = emotion;
    r.steps = cfg.steps;
    r.final_loss = curve.loss.back();
    r.match_rate[emotion] = match_rate(model, emotion, corpus);
    r.param_count = model.base_param_count();
    r.wall_seconds = elapsed_seconds(start);
    return run;
}

std::vector<RunReport> rank_sweep(const ToyModel& base, char scheme_id, Emotion emotion, const EmotionCorpus& corpus,
                                  const std::vector<int>& ranks, const TrainConfig& cfg) {
    std::vector<RunReport> out;
    for (int r : ranks) out.push_back(train_adapter(base, scheme_id, emotion, corpus, r, default_alpha(r), cfg).report);
    return out;
}

RunReport baseline_report(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus) {
    RunReport r;
    r.kind = "base";
    r.emotion = emotion;
    r.match_rate[emotion] = match_rate(base, emotion, corpus);
    return r;
}

std::vector<RunReport> scheme_sweep(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus, int rank,
                                    const TrainConfig& cfg, const std::vector<char>& schemes) {
    std::vector<RunReport> out;
    out.push_back(baseline_report(base, emotion, corpus));
    for (char id : schemes) {
        out.push_back(train_adapter(base, id, emotion, corpus, rank, default_alpha(rank), cfg).report);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string Table::csv() const {
    std::ostringstream os;
    os << corner;
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        os << row_labels[r];
        for (double v : cells[r]) os << ',' << shortest(v);
        os << '\n';
    }
    return os.str();
}

std::string Table::text() const {
    std::size_t label_w = corner.size();
    for (const auto& l : row_labels) label_w = std::max(label_w, l.size());
    std::vector<std::size_t> widths;
    for (const auto& c : columns) widths.push_back(std::max<std::size_t>(c.size(), 6));
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(label_w)) << corner;
    for (std::size_t c = 0; c < columns.size(); ++c) os << "  " << std::right << std::setw(static_cast<int>(widths[c])) << columns[c];
    os << '\n';
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        os << std::left << std::setw(static_cast<int>(label_w)) << row_labels[r];
        for (std::size_t c = 0; c < columns.size(); ++c) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(1) << 100.0 * cells[r][c];
            os << "  " << std::right << std::setw(static_cast<int>(widths[c])) << cell.str();
        }
        os << '\n';
    }
    return os.str();
}

namespace {

Table grid_table(const RateGrid& rates, std::string corner, std::vector<std::string> columns, bool captions) {
    Table t;
    t.corner = std::move(corner);
    t.columns = std::move(columns);
    for (const auto& [emotion, row] : rates) {
        t.row_labels.emplace_back(captions ? emotion_caption(emotion) : emotion_name(emotion));
        std::vector<double> cells;
        for (const auto& c : t.columns) {
            const auto it = row.find(c);
            if (it == row.end()) {
                throw LookupError("rate grid lacks column '" + c + "' for " + std::string(emotion_name(emotion)));
            }
            cells.push_back(it->second);
        }
        t.cells.push_back(std::move(cells));
    }
    return t;
}

} // namespace

std::string rank_column(int rank) { return "r=" + std::to_string(rank); }

Table scheme_table(const RateGrid& rates) {
    return grid_table(rates, "emotion", {"tts", "a", "b", "c", "d", "e", "f", "g", "h"}, false);
}

Table rank_table(const RateGrid& rates, const std::vector<int>& ranks) {
    std::vector<std::string> cols;
    for (int r : ranks) cols.push_back(rank_column(r));
    return grid_table(rates, "emotion", std::move(cols), false);
}

Table comparison_table(const RateGrid& rates) { return grid_table(rates, "emotion", {"g", "fine-tune"}, true); }

std::string report_csv_header() { return "kind,scheme,rank,alpha,emotion,steps,final_loss,match_rate,param_count"; }

std::string report_csv_row(const RunReport& r) {
    std::ostringstream os;
    const auto it = r.match_rate.find(r.emotion);
    os << r.kind << ',' << r.scheme << ',' << r.rank << ',' << shortest(r.alpha) << ',' << emotion_name(r.emotion)
       << ',' << r.steps << ',' << shortest(r.final_loss) << ',' << (it == r.match_rate.end() ? "" : shortest(it->second))
       << ',' << r.param_count;
    return os.str();
}

std::string reports_csv(const std::vector<RunReport>& reports) {
    std::string out = report_csv_header() + "\n";
    for (const auto& r : reports) out += report_csv_row(r) + "\n";
    return out;
}

} // namespace emolora
