#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emolora/adapterio.hpp"
#include "emolora/emodata.hpp"
#include "emolora/tensor.hpp"
#include "emolora/ttsmodel.hpp"

namespace emolora {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int steps = 2000;
    int batch = 8;
    std::uint64_t seed = 1;
    double lambda_out = 1.0;
    double lambda_dur = 1.0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

// Adam with bias correction. Moments live in double; the update is rounded
// to float once per element.
class Adam {
public:
    explicit Adam(const TrainConfig& cfg) : lr_(cfg.lr), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {}
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Params must be passed in the same order on every call.
    void step(const std::vector<Param*>& params);
    long steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// One supervised example: the frame grid used for expansion (teacher
// forcing), per-token duration targets and the output features on that grid.
struct Sample {
    std::vector<int> tokens;
    std::vector<int> frames;
    std::vector<float> durations;
    Tensor output;
};

// Deterministic outputs of a teacher model on random token sequences. The
// duration targets are the teacher's unclamped predictions.
std::vector<Sample> teacher_targets(const ToyModel& teacher, const CorpusOptions& options);

// Samples for one emotion from the corpus train split; durations are the
// target frame counts.
std::vector<Sample> emotion_samples(const EmotionCorpus& corpus, Emotion e);

// lambda_out * mse(output, target) + lambda_dur * mse(log dur, log target),
// computed on a teacher-forced forward pass.
double sample_loss(const ToyModel& model, const Sample& s, const TrainConfig& cfg);
// Same loss; accumulates `weight` * its gradient into every trainable param.
double accumulate_gradients(ToyModel& model, const Sample& s, const TrainConfig& cfg, double weight);

struct LossCurve {
    std::vector<double> loss; // batch-mean loss before each update, plus the final loss at index `steps`
};

// Mini-batch Adam over `params` of `model`. Batches are drawn with
// replacement from `data` by an Rng split from cfg.seed. Throws
// TrainingError naming the step on a non-finite loss.
LossCurve train_params(ToyModel& model, const std::vector<Param*>& params, const std::vector<Sample>& data,
                       const TrainConfig& cfg);

// Trains every base param on the teacher targets, then marks the model
// pretrained and freezes it.
LossCurve pretrain_base(ToyModel& model, const std::vector<Sample>& teacher, const TrainConfig& cfg);

struct RunReport {
    std::string kind;                      // "adapter", "finetune" or "base"
    char scheme = '-';
    int rank = 0;
    float alpha = 0.0f;
    Emotion emotion = Emotion::neutral;
    int steps = 0;
    double final_loss = 0.0;
    std::map<Emotion, double> match_rate;  // evaluated on the test split
    std::size_t param_count = 0;
    double wall_seconds = 0.0;             // not part of the canonical CSV
};

struct AdapterRun {
    AdapterBundle bundle;
    RunReport report;
};

// Default alpha equals the rank, so the delta scale is 1.
float default_alpha(int rank);

// Copies `base`, applies the scheme, trains only the adapter factors on the
// emotion's targets, and returns the detached bundle. The base checksum is
// checked before and after; a change raises InternalError.
AdapterRun train_adapter(const ToyModel& base, char scheme_id, Emotion emotion, const EmotionCorpus& corpus, int rank,
                         float alpha, const TrainConfig& cfg);

struct FineTuneRun {
    ToyModel model;
    RunReport report;
};

// Trains every inference-path param of a copy of `base`.
FineTuneRun fine_tune_full(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus,
                           const TrainConfig& cfg);

inline const std::vector<int> kDefaultRanks = {2, 4, 8, 16};

// One report per rank, in the order given; alpha = rank for every cell.
std::vector<RunReport> rank_sweep(const ToyModel& base, char scheme_id, Emotion emotion, const EmotionCorpus& corpus,
                                  const std::vector<int>& ranks, const TrainConfig& cfg);

// First row is the no-adapter baseline (scheme '-'), then one per scheme.
std::vector<RunReport> scheme_sweep(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus, int rank,
                                    const TrainConfig& cfg, const std::vector<char>& schemes = {'a', 'b', 'c', 'd',
                                                                                                'e', 'f', 'g', 'h'});

RunReport baseline_report(const ToyModel& base, Emotion emotion, const EmotionCorpus& corpus);

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

// Rows of labelled numeric cells; rendered as CSV or aligned text.
struct Table {
    std::string corner;                 // header of the row-label column
    std::vector<std::string> columns;   // data column headers
    std::vector<std::string> row_labels;
    std::vector<std::vector<double>> cells;

    std::string csv() const;
    std::string text() const;
};

// Match rates keyed by emotion then column (scheme id, "tts", "r=4", ...).
using RateGrid = std::map<Emotion, std::map<std::string, double>>;

Table scheme_table(const RateGrid& rates);  // columns tts, a..h
Table rank_table(const RateGrid& rates, const std::vector<int>& ranks = kDefaultRanks);
Table comparison_table(const RateGrid& rates);  // columns g, fine-tune; rows Angry..Surprise

std::string rank_column(int rank);  // "r=4"

// Long-form CSV of reports: header plus one line per report.
std::string reports_csv(const std::vector<RunReport>& reports);
std::string report_csv_header();
std::string report_csv_row(const RunReport& r);

} // namespace emolora
