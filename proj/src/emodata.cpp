#include "emolora/emodata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "emolora/errors.hpp"
#include "emolora/rng.hpp"

namespace emolora {

namespace {

constexpr std::array<std::string_view, kEmotionCount> kNames = {"neutral", "angry", "happy", "sad", "surprise"};
constexpr std::array<std::string_view, kEmotionCount> kCaptions = {"Neutral", "Angry", "Happy", "Sad", "Surprise"};

const std::array<EmotionTransform, kEmotionCount> kTransforms = {{
    {1.0f, 1.0f, 0.0f, 1, 0.0f, 1},  // neutral
    {1.3f, 0.8f, 0.0f, 1, 0.0f, 1},  // angry
    {1.0f, 1.0f, 0.2f, 8, 0.0f, 1},  // happy
    {0.7f, 1.3f, 0.0f, 1, 0.0f, 1},  // sad
    {1.0f, 1.0f, 0.0f, 1, 0.5f, 16}, // surprise
}};

std::size_t idx(Emotion e) { return static_cast<std::size_t>(e); }

Tensor row_tensor(const std::vector<int>& v) {
    std::vector<float> f(v.begin(), v.end());
    return Tensor({1, v.size()}, std::move(f));
}

std::vector<int> int_values(const Record& r) {
    std::vector<int> out;
    out.reserve(r.a.size());
    for (float f : r.a) {
        const int v = static_cast<int>(f);
        if (static_cast<float>(v) != f) throw FormatError("record '" + r.path + "' holds a non-integer value");
        out.push_back(v);
    }
    return out;
}

Record tensor_record(std::string path, const Tensor& t) {
    return Record{std::move(path), RecordKind::tensor, static_cast<std::uint32_t>(t.rows()),
                  static_cast<std::uint32_t>(t.cols()), t.data(), {}};
}

Record int_record(std::string path, const std::vector<int>& v) { return tensor_record(std::move(path), row_tensor(v)); }

template <class T>
T meta_number(const NameField& nf, const char* key) {
    const auto v = nf.get(key);
    if (!v) throw FormatError(std::string("corpus container lacks '") + key + "'");
    T out{};
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) throw FormatError(std::string("bad value for '") + key + "'");
    return out;
}

} // namespace

std::string_view emotion_name(Emotion e) { return kNames.at(idx(e)); }
std::string_view emotion_caption(Emotion e) { return kCaptions.at(idx(e)); }

Emotion parse_emotion(std::string_view text) {
    for (Emotion e : kEmotions) {
        if (emotion_name(e) == text) return e;
    }
    throw ConfigError("unknown emotion '" + std::string(text) + "' (valid: neutral, angry, happy, sad, surprise)");
}

const EmotionTransform& emotion_transform(Emotion e) { return kTransforms.at(idx(e)); }

std::vector<int> scale_frames(const std::vector<int>& frames, Emotion e, int max_duration) {
    const EmotionTransform& tf = emotion_transform(e);
    std::vector<int> out;
    out.reserve(frames.size());
    for (int f : frames) {
        const double scaled = std::round(static_cast<double>(tf.dur_scale) * f);
        out.push_back(static_cast<int>(std::clamp(scaled, 1.0, static_cast<double>(max_duration))));
    }
    return out;
}

Tensor transform_output(const Tensor& output, Emotion e) {
    if (e == Emotion::neutral) return output;
    const EmotionTransform& tf = emotion_transform(e);
    Tensor out = output;
    const std::size_t cols = out.cols();
    for (std::size_t t = 0; t < out.rows(); ++t) {
        double factor = tf.gain;
        if (tf.pulse_gain != 0.0f && t % static_cast<std::size_t>(tf.pulse_period) == 0) factor *= 1.0 + tf.pulse_gain;
        double add = 0.0;
        if (tf.additive_amp != 0.0f) {
            add = tf.additive_amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / tf.additive_period);
        }
        for (std::size_t c = 0; c < cols; ++c) {
            float& v = out[t * cols + c];
            v = static_cast<float>(static_cast<double>(v) * factor + add);
        }
    }
    return out;
}

EmotionTarget apply_emotion(const std::vector<int>& frames, const Tensor& output, Emotion e, int max_duration,
                            const Renderer& render) {
    if (e == Emotion::neutral) return {frames, output};
    std::vector<int> scaled = scale_frames(frames, e, max_duration);
    if (scaled == frames) return {std::move(scaled), transform_output(output, e)};
    if (!render) throw StateError("apply_emotion: frame counts changed but no renderer was given");
    Tensor regenerated = render(scaled);
    return {std::move(scaled), transform_output(regenerated, e)};
}

void CorpusOptions::validate(int vocab) const {
    if (utterances < 2) throw ConfigError("corpus needs at least 2 utterances, got " + std::to_string(utterances));
    if (min_len < 1 || max_len < min_len) {
        throw ConfigError("corpus length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) +
                          "] is invalid");
    }
    if (vocab < 1) throw ConfigError("corpus vocabulary is empty");
}

bool is_test_index(std::size_t index) { return Rng::mix64(static_cast<std::uint64_t>(index)) % 5 == 0; }

std::vector<std::size_t> EmotionCorpus::train_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i) {
        if (!utterances[i].test) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> EmotionCorpus::test_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < utterances.size(); ++i) {
        if (utterances[i].test) out.push_back(i);
    }
    return out;
}

EmotionCorpus gen_corpus(const ToyModel& base, const CorpusOptions& options) {
    if (!base.pretrained()) throw StateError("gen_corpus: base model is not pretrained");
    if (base.has_adapters()) throw StateError("gen_corpus: base model carries adapters");
    const ModelConfig& cfg = base.config();
    options.validate(cfg.vocab);

    EmotionCorpus corpus;
    corpus.options = options;
    corpus.max_duration = cfg.max_duration;
    corpus.out_dim = cfg.out_dim;
    corpus.base_checksum = base.base_checksum();
    const Rng root(options.seed);
    const auto span = static_cast<std::uint32_t>(options.max_len - options.min_len + 1);
    for (int i = 0; i < options.utterances; ++i) {
        Rng rng = root.split(static_cast<std::uint64_t>(i));
        Utterance u;
        const int len = options.min_len + static_cast<int>(rng.below(span));
        for (int t = 0; t < len; ++t) u.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.vocab))));
        u.test = is_test_index(static_cast<std::size_t>(i));

        SynthOutput neutral = base.forward(u.tokens);
        const Renderer render = [&](const std::vector<int>& frames) {
            return base.forward_with_frames(u.tokens, frames).output;
        };
        for (Emotion e : kEmotions) {
            u.targets[idx(e)] = apply_emotion(neutral.frames, neutral.output, e, cfg.max_duration, render);
        }
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

bool bitwise_equal(const EmotionCorpus& x, const EmotionCorpus& y) {
    if (!(x.options == y.options) || x.max_duration != y.max_duration || x.out_dim != y.out_dim ||
        x.base_checksum != y.base_checksum || x.utterances.size() != y.utterances.size()) {
        return false;
    }
    for (std::size_t i = 0; i < x.utterances.size(); ++i) {
        const Utterance& a = x.utterances[i];
        const Utterance& b = y.utterances[i];
        if (a.tokens != b.tokens || a.test != b.test) return false;
        for (std::size_t e = 0; e < kEmotionCount; ++e) {
            if (a.targets[e].frames != b.targets[e].frames || !a.targets[e].output.bitwise_equal(b.targets[e].output)) {
                return false;
            }
        }
    }
    return true;
}

double target_distance(const std::vector<int>& frames, const Tensor& output, const EmotionTarget& candidate) {
    if (frames.size() != candidate.frames.size()) {
        throw InputError("classify: observation has " + std::to_string(frames.size()) + " tokens, reference has " +
                         std::to_string(candidate.frames.size()));
    }
    if (output.cols() != candidate.output.cols()) throw ShapeError("classify: feature dimension mismatch");

    double dur = 0.0;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        const double diff = std::log(static_cast<double>(frames[t])) - std::log(static_cast<double>(candidate.frames[t]));
        dur += diff * diff;
    }
    const std::size_t t_obs = output.rows();
    const std::size_t t_ref = candidate.output.rows();
    const std::size_t overlap = std::min(t_obs, t_ref);
    const std::size_t cols = output.cols();
    double feat = 0.0;
    for (std::size_t i = 0; i < overlap * cols; ++i) {
        const double diff = static_cast<double>(output[i]) - static_cast<double>(candidate.output[i]);
        feat += diff * diff;
    }
    feat /= static_cast<double>(overlap);
    const double len = std::abs(std::log(static_cast<double>(t_obs)) - std::log(static_cast<double>(t_ref)));
    return std::sqrt(dur) + std::sqrt(feat) + len;
}

std::array<double, kEmotionCount> emotion_distances(const std::vector<int>& frames, const Tensor& output,
                                                    const Utterance& utt) {
    std::array<double, kEmotionCount> out{};
    for (Emotion e : kEmotions) out[idx(e)] = target_distance(frames, output, utt.target(e));
    return out;
}

Emotion classify(const std::vector<int>& frames, const Tensor& output, const Utterance& utt) {
    const auto dist = emotion_distances(frames, output, utt);
    std::size_t best = 0;
    for (std::size_t e = 1; e < kEmotionCount; ++e) {
        if (dist[e] < dist[best]) best = e;
    }
    return kEmotions[best];
}

double match_rate(const Synthesizer& synth, Emotion label, const EmotionCorpus& corpus) {
    const auto test = corpus.test_indices();
    if (test.empty()) throw InputError("match_rate: test split is empty");
    std::size_t hits = 0;
    for (std::size_t i : test) {
        const Utterance& u = corpus.utterances[i];
        const SynthOutput out = synth(u.tokens);
        if (classify(out.frames, out.output, u) == label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

double match_rate(const ToyModel& model, Emotion label, const EmotionCorpus& corpus) {
    return match_rate([&](const std::vector<int>& tokens) { return model.forward(tokens); }, label, corpus);
}

Container corpus_to_container(const EmotionCorpus& corpus) {
    Container c;
    c.kind = ContainerKind::corpus;
    c.name = NameField{"corpus",
                       {{"utterances", std::to_string(corpus.options.utterances)},
                        {"min_len", std::to_string(corpus.options.min_len)},
                        {"max_len", std::to_string(corpus.options.max_len)},
                        {"seed", std::to_string(corpus.options.seed)},
                        {"max_duration", std::to_string(corpus.max_duration)},
                        {"out_dim", std::to_string(corpus.out_dim)},
                        {"base_crc", std::to_string(corpus.base_checksum)}}}
                 .encode();
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
        const Utterance& u = corpus.utterances[i];
        const std::string prefix = "u" + std::to_string(i) + ".";
        c.records.push_back(int_record(prefix + "tokens", u.tokens));
        for (Emotion e : kEmotions) {
            const std::string p = prefix + std::string(emotion_name(e)) + ".";
            c.records.push_back(int_record(p + "frames", u.target(e).frames));
            c.records.push_back(tensor_record(p + "output", u.target(e).output));
        }
    }
    return c;
}

EmotionCorpus corpus_from_container(const Container& c) {
    if (c.kind != ContainerKind::corpus) throw FormatError("container is not a corpus");
    const NameField nf = NameField::parse(c.name);
    if (nf.label != "corpus") throw FormatError("CORP container holds '" + nf.label + "', not a corpus");
    EmotionCorpus corpus;
    corpus.options.utterances = meta_number<int>(nf, "utterances");
    corpus.options.min_len = meta_number<int>(nf, "min_len");
    corpus.options.max_len = meta_number<int>(nf, "max_len");
    corpus.options.seed = meta_number<std::uint64_t>(nf, "seed");
    corpus.max_duration = meta_number<int>(nf, "max_duration");
    corpus.out_dim = meta_number<int>(nf, "out_dim");
    corpus.base_checksum = meta_number<std::uint32_t>(nf, "base_crc");

    const std::size_t per_utt = 1 + 2 * kEmotionCount;
    const auto n = static_cast<std::size_t>(corpus.options.utterances);
    if (c.records.size() != n * per_utt) {
        throw FormatError("corpus declares " + std::to_string(n) + " utterances but holds " +
                          std::to_string(c.records.size()) + " records");
    }
    std::size_t k = 0;
    auto next = [&](const std::string& path) -> const Record& {
        const Record& r = c.records[k++];
        if (r.path != path || r.kind != RecordKind::tensor) {
            throw FormatError("corpus record '" + r.path + "' found where '" + path + "' was expected");
        }
        return r;
    };
    for (std::size_t i = 0; i < n; ++i) {
        Utterance u;
        const std::string prefix = "u" + std::to_string(i) + ".";
        u.tokens = int_values(next(prefix + "tokens"));
        u.test = is_test_index(i);
        for (Emotion e : kEmotions) {
            const std::string p = prefix + std::string(emotion_name(e)) + ".";
            EmotionTarget& t = u.targets[idx(e)];
            t.frames = int_values(next(p + "frames"));
            const Record& out = next(p + "output");
            if (out.d_out != static_cast<std::uint32_t>(corpus.out_dim)) {
                throw FormatError("corpus record '" + out.path + "' has wrong feature dimension");
            }
            t.output = Tensor({out.d_in, out.d_out}, out.a);
        }
        corpus.utterances.push_back(std::move(u));
    }
    return corpus;
}

void save_corpus(const EmotionCorpus& corpus, const std::filesystem::path& path) {
    write_file(path, encode(corpus_to_container(corpus)));
}

EmotionCorpus load_corpus(const std::filesystem::path& path) { return corpus_from_container(decode(read_file(path))); }

Container synth_to_container(const SynthOutput& out, const std::string& label) {
    Container c;
    c.kind = ContainerKind::corpus;
    c.name = NameField{"synth", {{"adapter", label}}}.encode();
    c.records.push_back(tensor_record("durations", Tensor({1, out.durations.size()}, out.durations)));
    c.records.push_back(int_record("frames", out.frames));
    c.records.push_back(tensor_record("mu", out.mu));
    c.records.push_back(tensor_record("logvar", out.logvar));
    c.records.push_back(tensor_record("acoustic", out.acoustic));
    c.records.push_back(tensor_record("output", out.output));
    return c;
}

} // namespace emolora
