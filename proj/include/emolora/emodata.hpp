#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "emolora/adapterio.hpp"
#include "emolora/tensor.hpp"
#include "emolora/ttsmodel.hpp"

namespace emolora {

// Declaration order is the classifier's tie-break order.
enum class Emotion { neutral = 0, angry = 1, happy = 2, sad = 3, surprise = 4 };

inline constexpr std::size_t kEmotionCount = 5;
inline constexpr std::array<Emotion, kEmotionCount> kEmotions = {Emotion::neutral, Emotion::angry, Emotion::happy,
                                                                  Emotion::sad, Emotion::surprise};
// The four labels adapters are trained for.
inline constexpr std::array<Emotion, 4> kAdapterEmotions = {Emotion::angry, Emotion::happy, Emotion::sad,
                                                            Emotion::surprise};

std::string_view emotion_name(Emotion e);      // "angry"
std::string_view emotion_caption(Emotion e);   // "Angry"
Emotion parse_emotion(std::string_view text);  // ConfigError listing the valid labels

// output'[t][c] = output[t][c] * gain * (1 + pulse_gain * [t mod pulse_period == 0])
//                 + additive_amp * sin(2 pi t / additive_period)
// durations'    = clamp(round(dur_scale * frames), 1, max_duration)
struct EmotionTransform {
    float gain = 1.0f;
    float dur_scale = 1.0f;
    float additive_amp = 0.0f;
    int additive_period = 1;
    float pulse_gain = 0.0f;
    int pulse_period = 1;
};

const EmotionTransform& emotion_transform(Emotion e);

std::vector<int> scale_frames(const std::vector<int>& frames, Emotion e, int max_duration);
// Applies the gain / pattern part of the transform frame by frame.
Tensor transform_output(const Tensor& output, Emotion e);

// Produces the base model's deterministic output on a forced frame grid.
using Renderer = std::function<Tensor(const std::vector<int>& frames)>;

struct EmotionTarget {
    std::vector<int> frames;
    Tensor output;
};

// Rescales the frame counts and, when they change, regenerates the neutral
// output on the new grid through `render` before transforming it. Neutral is
// the identity and never calls `render`.
EmotionTarget apply_emotion(const std::vector<int>& frames, const Tensor& output, Emotion e, int max_duration,
                            const Renderer& render);

struct Utterance {
    std::vector<int> tokens;
    std::array<EmotionTarget, kEmotionCount> targets; // indexed by Emotion; [neutral] is the base output
    bool test = false;

    const EmotionTarget& target(Emotion e) const { return targets[static_cast<std::size_t>(e)]; }
};

struct CorpusOptions {
    int utterances = 200;
    int min_len = 3;
    int max_len = 8;
    std::uint64_t seed = 7;

    void validate(int vocab) const;
    bool operator==(const CorpusOptions&) const = default;
};

struct EmotionCorpus {
    CorpusOptions options;
    int max_duration = 0;
    int out_dim = 0;
    std::uint32_t base_checksum = 0;
    std::vector<Utterance> utterances;

    std::vector<std::size_t> train_indices() const;
    std::vector<std::size_t> test_indices() const;
};

// 80/20 split by a fixed hash of the utterance index.
bool is_test_index(std::size_t index);

EmotionCorpus gen_corpus(const ToyModel& base, const CorpusOptions& options);

bool bitwise_equal(const EmotionCorpus& x, const EmotionCorpus& y);

// Distance from an observation to one candidate target: L2 over per-token
// log frame counts, plus RMS feature distance per frame on the overlapping
// prefix, plus |log T_obs - log T_candidate|.
double target_distance(const std::vector<int>& frames, const Tensor& output, const EmotionTarget& candidate);

std::array<double, kEmotionCount> emotion_distances(const std::vector<int>& frames, const Tensor& output,
                                                    const Utterance& utt);

Emotion classify(const std::vector<int>& frames, const Tensor& output, const Utterance& utt);

// Produces (frames, output) for an utterance's tokens.
using Synthesizer = std::function<SynthOutput(const std::vector<int>& tokens)>;

double match_rate(const Synthesizer& synth, Emotion label, const EmotionCorpus& corpus);
// Deterministic forward of `model` (with whatever adapters it carries).
double match_rate(const ToyModel& model, Emotion label, const EmotionCorpus& corpus);

Container corpus_to_container(const EmotionCorpus& corpus);
EmotionCorpus corpus_from_container(const Container& c);
void save_corpus(const EmotionCorpus& corpus, const std::filesystem::path& path);
EmotionCorpus load_corpus(const std::filesystem::path& path);

// Single synthesis result as a CORP container (tensors "durations",
// "frames", "mu", "logvar", "acoustic", "output").
Container synth_to_container(const SynthOutput& out, const std::string& label);

} // namespace emolora
