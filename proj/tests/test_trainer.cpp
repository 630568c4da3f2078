#include <gtest/gtest.h>

#include <cmath>

#include "emolora/adapterio.hpp"
#include "emolora/errors.hpp"
#include "emolora/schemes.hpp"
#include "emolora/trainer.hpp"

using namespace emolora;

namespace {

ToyModel flagged_base() {
    ToyModel m = ToyModel::create(ModelConfig{}, 1);
    m.set_pretrained(true);
    m.set_base_trainable(false);
    return m;
}

const EmotionCorpus& small_corpus() {
    static const EmotionCorpus corpus = [] {
        CorpusOptions opt;
        opt.utterances = 40;
        return gen_corpus(flagged_base(), opt);
    }();
    return corpus;
}

TrainConfig short_run(int steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.lr = 1e-2;
    return cfg;
}

bool same_bytes(const AdapterBundle& a, const AdapterBundle& b) {
    return encode(to_container(a)) == encode(to_container(b));
}

} // namespace

TEST(TrainConfig, Validation) {
    EXPECT_NO_THROW(TrainConfig{}.validate());
    TrainConfig c;
    c.steps = 0;
    EXPECT_NO_THROW(c.validate());
    c.steps = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.batch = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.eps = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lambda_dur = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Adam, MatchesHandComputationOnQuadratic) {
    // f(x) = 0.5 * sum (x - c)^2, gradient x - c
    const std::vector<double> c = {1.0, -2.0, 0.5};
    Param p(Tensor({1, 3}, {0.0f, 0.0f, 3.0f}));
    Adam opt(0.1, 0.9, 0.999, 1e-8);
    std::vector<double> x = {0.0, 0.0, 3.0}, m(3, 0.0), v(3, 0.0);
    for (int t = 1; t <= 5; ++t) {
        for (std::size_t i = 0; i < 3; ++i) p.grad[i] = static_cast<float>(p.value[i] - c[i]);
        opt.step({&p});
        for (std::size_t i = 0; i < 3; ++i) {
            const double g = x[i] - c[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, t));
            const double vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value[i], x[i], 1e-6) << "step " << t;
    }
    // first step moves each coordinate by lr toward its target
    EXPECT_EQ(opt.steps_taken(), 5);
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
    Param p(Tensor({1, 2}, {0.0f, 0.0f}));
    p.grad[0] = 3.0f;
    p.grad[1] = -0.25f;
    Adam opt(0.01, 0.9, 0.999, 1e-8);
    opt.step({&p});
    EXPECT_NEAR(p.value[0], -0.01, 1e-8);
    EXPECT_NEAR(p.value[1], 0.01, 1e-8);
    Param q(Tensor({1, 1}, {0.0f}));
    EXPECT_THROW(opt.step({&p, &q}), StateError);
}

TEST(Loss, SelfDistillationIsZero) {
    const ToyModel model = ToyModel::create(ModelConfig{}, 3);
    CorpusOptions opt;
    opt.utterances = 10;
    for (const Sample& s : teacher_targets(model, opt)) EXPECT_EQ(sample_loss(model, s, TrainConfig{}), 0.0);
}

TEST(Loss, WeightsScaleTheTerms) {
    const ToyModel teacher = ToyModel::create(ModelConfig{}, 3);
    const ToyModel student = ToyModel::create(ModelConfig{}, 4);
    CorpusOptions opt;
    opt.utterances = 5;
    const Sample s = teacher_targets(teacher, opt)[0];
    TrainConfig out_only, dur_only, both;
    out_only.lambda_dur = 0.0;
    dur_only.lambda_out = 0.0;
    both.lambda_out = 2.0;
    both.lambda_dur = 3.0;
    const double lo = sample_loss(student, s, out_only);
    const double ld = sample_loss(student, s, dur_only);
    EXPECT_GT(lo, 0.0);
    EXPECT_GT(ld, 0.0);
    EXPECT_NEAR(sample_loss(student, s, both), 2.0 * lo + 3.0 * ld, 1e-9 * (lo + ld));
}

TEST(Pretrain, LossFallsAndModelIsFrozen) {
    const ToyModel teacher = ToyModel::create(ModelConfig{}, 1001);
    ToyModel base = ToyModel::create(ModelConfig{}, 1);
    CorpusOptions opt;
    opt.utterances = 30;
    const auto data = teacher_targets(teacher, opt);
    const LossCurve curve = pretrain_base(base, data, short_run(60));
    ASSERT_EQ(curve.loss.size(), 61u);
    EXPECT_LT(curve.loss.back(), curve.loss.front());
    EXPECT_TRUE(base.pretrained());
    for (const auto& [name, p] : base.base_params()) EXPECT_FALSE(p->trainable) << name;
}

TEST(Training, NonFiniteLossIsTrainingError) {
    ToyModel model = ToyModel::create(ModelConfig{}, 1);
    CorpusOptions opt;
    opt.utterances = 4;
    auto data = teacher_targets(model, opt);
    for (Sample& s : data) s.output[0] = std::nanf("");
    model.set_base_trainable(true);
    std::vector<Param*> params;
    for (auto& [n, p] : model.base_params()) params.push_back(p);
    try {
        train_params(model, params, data, short_run(3));
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    }
    EXPECT_THROW(train_params(model, params, {}, short_run(3)), InputError);
}

TEST(TrainAdapter, ZeroStepsGivesZeroDelta) {
    const ToyModel base = flagged_base();
    const AdapterRun run = train_adapter(base, 'g', Emotion::angry, small_corpus(), 4, 4.0f, short_run(0));
    EXPECT_EQ(run.report.steps, 0);
    for (const auto& r : run.bundle.records) {
        for (float v : r.b.data()) EXPECT_EQ(v, 0.0f) << r.path;
    }
    ToyModel adapted = base;
    attach_bundle(adapted, run.bundle);
    for (const Utterance& u : small_corpus().utterances) {
        EXPECT_TRUE(adapted.forward(u.tokens).output.bitwise_equal(base.forward(u.tokens).output));
    }
}

TEST(TrainAdapter, TrainsWithoutTouchingTheBase) {
    const ToyModel base = flagged_base();
    const std::uint32_t crc = base.base_checksum();
    const AdapterRun run = train_adapter(base, 'g', Emotion::sad, small_corpus(), 4, 4.0f, short_run(40));
    EXPECT_EQ(base.base_checksum(), crc);
    EXPECT_EQ(run.bundle.base_checksum, crc);
    EXPECT_FALSE(base.has_adapters());
    EXPECT_EQ(run.report.kind, "adapter");
    EXPECT_EQ(run.report.scheme, 'g');
    EXPECT_EQ(run.report.param_count, scheme_param_count(base, 'g', 4));
    EXPECT_EQ(run.bundle.param_count(), run.report.param_count);

    const auto samples = emotion_samples(small_corpus(), Emotion::sad);
    const TrainConfig cfg = short_run(40);
    double before = 0.0, after = 0.0;
    ToyModel adapted = base;
    attach_bundle(adapted, run.bundle);
    for (const Sample& s : samples) {
        before += sample_loss(base, s, cfg);
        after += sample_loss(adapted, s, cfg);
    }
    EXPECT_LT(after, before);
    EXPECT_NEAR(after / static_cast<double>(samples.size()), run.report.final_loss, 1e-9);
}

TEST(TrainAdapter, DeterministicUnderSeed) {
    const ToyModel base = flagged_base();
    const auto a = train_adapter(base, 'e', Emotion::happy, small_corpus(), 2, 2.0f, short_run(15));
    const auto b = train_adapter(base, 'e', Emotion::happy, small_corpus(), 2, 2.0f, short_run(15));
    EXPECT_TRUE(same_bytes(a.bundle, b.bundle));
    EXPECT_EQ(a.report.final_loss, b.report.final_loss);
    TrainConfig other = short_run(15);
    other.seed = 2;
    EXPECT_FALSE(same_bytes(a.bundle, train_adapter(base, 'e', Emotion::happy, small_corpus(), 2, 2.0f, other).bundle));
}

TEST(TrainAdapter, RejectsBadInputs) {
    const ToyModel base = flagged_base();
    EXPECT_THROW(train_adapter(base, 'z', Emotion::angry, small_corpus(), 4, 4.0f, short_run(1)), ConfigError);
    EXPECT_THROW(train_adapter(ToyModel::create(ModelConfig{}, 1), 'g', Emotion::angry, small_corpus(), 4, 4.0f,
                               short_run(1)),
                 StateError);
    ToyModel other = ToyModel::create(ModelConfig{}, 2);
    other.set_pretrained(true);
    EXPECT_THROW(train_adapter(other, 'g', Emotion::angry, small_corpus(), 4, 4.0f, short_run(1)), CompatibilityError);
    EXPECT_THROW(train_adapter(base, 'g', Emotion::angry, small_corpus(), 0, 4.0f, short_run(1)), ConfigError);
}

TEST(FineTune, TrainsACopyAndCountsAllParams) {
    const ToyModel base = flagged_base();
    const std::uint32_t crc = base.base_checksum();
    const FineTuneRun run = fine_tune_full(base, Emotion::angry, small_corpus(), short_run(10));
    EXPECT_EQ(base.base_checksum(), crc);
    EXPECT_NE(run.model.base_checksum(), crc);
    EXPECT_EQ(run.report.kind, "finetune");
    EXPECT_EQ(run.report.param_count, base.base_param_count());
}

TEST(ParamCounts, FineTuneVersusSchemeG) {
    const ToyModel base = flagged_base();
    // embedding 64*32, per-layer weight + bias of the fifteen layers
    EXPECT_EQ(base.base_param_count(), 14961u);
    // r = 4: duration predictor 4*64 + 1*33, flow 8*4*32,
    // decoder conv1 4*(40*3+32), conv2 4*(32*3+16)
    EXPECT_EQ(scheme_param_count(base, 'g', 4), 2369u);
    const double ratio = static_cast<double>(base.base_param_count()) / 2369.0;
    EXPECT_NEAR(ratio, 6.3153, 1e-4);
}

TEST(Sweeps, BaselineRowComesFirst) {
    const ToyModel base = flagged_base();
    const auto rows = scheme_sweep(base, Emotion::angry, small_corpus(), 4, short_run(2), {'a', 'g'});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].kind, "base");
    EXPECT_EQ(rows[0].scheme, '-');
    EXPECT_EQ(rows[0].match_rate.at(Emotion::angry), 0.0);
    EXPECT_EQ(rows[1].scheme, 'a');
    EXPECT_EQ(rows[2].scheme, 'g');

    const auto ranks = rank_sweep(base, 'g', Emotion::angry, small_corpus(), {2, 8}, short_run(2));
    ASSERT_EQ(ranks.size(), 2u);
    EXPECT_EQ(ranks[1].rank, 8);
    EXPECT_EQ(ranks[1].alpha, 8.0f);

    const std::string csv = reports_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "kind,scheme,rank,alpha,emotion,steps,final_loss,match_rate,param_count");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Tables, Headers) {
    RateGrid grid;
    for (Emotion e : kAdapterEmotions) {
        for (const char* c : {"tts", "a", "b", "c", "d", "e", "f", "g", "h", "fine-tune", "r=2", "r=4", "r=8", "r=16"}) {
            grid[e][c] = 0.25;
        }
    }
    const std::string s = scheme_table(grid).csv();
    EXPECT_EQ(s.substr(0, s.find('\n')), "emotion,tts,a,b,c,d,e,f,g,h");
    const std::string r = rank_table(grid).csv();
    EXPECT_EQ(r.substr(0, r.find('\n')), "emotion,r=2,r=4,r=8,r=16");
    const Table c = comparison_table(grid);
    EXPECT_EQ(c.columns, (std::vector<std::string>{"g", "fine-tune"}));
    EXPECT_EQ(c.row_labels, (std::vector<std::string>{"Angry", "Happy", "Sad", "Surprise"}));
    EXPECT_NE(c.csv().find("Angry,0.25,0.25\n"), std::string::npos);
    grid[Emotion::sad].erase("h");
    EXPECT_THROW(scheme_table(grid), LookupError);
}

TEST(Training, DivergenceIsTrainingError) {
    const ToyModel teacher = ToyModel::create(ModelConfig{}, 1001);
    ToyModel base = ToyModel::create(ModelConfig{}, 1);
    CorpusOptions opt;
    opt.utterances = 5;
    TrainConfig cfg = short_run(5);
    cfg.lr = 1e300;
    EXPECT_THROW(pretrain_base(base, teacher_targets(teacher, opt), cfg), TrainingError);
}
