#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "emolora/errors.hpp"
#include "emolora/schemes.hpp"
#include "test_support.hpp"

using namespace emolora;

namespace {

std::set<std::string_view> module_set(char id) {
    const auto& m = modules_of(id);
    return {m.begin(), m.end()};
}

std::string module_of(const std::string& path) { return path.substr(0, path.find('.')); }

} // namespace

TEST(Schemes, FixedMapping) {
    EXPECT_EQ(module_set('a'), (std::set<std::string_view>{"text_encoder"}));
    EXPECT_EQ(module_set('b'), (std::set<std::string_view>{"flow"}));
    EXPECT_EQ(module_set('c'), (std::set<std::string_view>{"decoder"}));
    EXPECT_EQ(module_set('d'), (std::set<std::string_view>{"flow", "decoder"}));
    EXPECT_EQ(module_set('e'), (std::set<std::string_view>{"duration_predictor"}));
    EXPECT_EQ(module_set('f'), (std::set<std::string_view>{"duration_predictor", "text_encoder"}));
    EXPECT_EQ(module_set('g'), (std::set<std::string_view>{"duration_predictor", "flow", "decoder"}));
    EXPECT_EQ(module_set('h'), (std::set<std::string_view>{"duration_predictor", "flow", "decoder", "projection"}));
}

TEST(Schemes, TotalityAndGSubsetOfH) {
    EXPECT_EQ(kSchemeIds.size(), 8u);
    for (char id : kSchemeIds) {
        EXPECT_TRUE(is_scheme_id(id));
        EXPECT_FALSE(modules_of(id).empty());
        EXPECT_FALSE(scheme(id).caption.empty());
    }
    auto g = module_set('g');
    auto h = module_set('h');
    EXPECT_TRUE(std::includes(h.begin(), h.end(), g.begin(), g.end()));
    h.erase("projection");
    EXPECT_EQ(g, h);
}

TEST(Schemes, UnknownIdListsValidIds) {
    try {
        modules_of('z');
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("a, b, c, d, e, f, g, h"), std::string::npos);
    }
    EXPECT_THROW(parse_scheme_id("gg"), ConfigError);
    EXPECT_THROW(parse_scheme_id(""), ConfigError);
    EXPECT_EQ(parse_scheme_id("g"), 'g');
}

TEST(Schemes, CoverageUsesWholeModuleNames) {
    EXPECT_TRUE(scheme_covers('b', "flow.cpl0.scale.lin1"));
    EXPECT_FALSE(scheme_covers('b', "flowx.lin"));
    EXPECT_FALSE(scheme_covers('g', "projection.lin"));
    EXPECT_TRUE(scheme_covers('h', "projection.lin"));
}

TEST(Schemes, ApplyAdaptsExactlyCoveredPaths) {
    for (char id : kSchemeIds) {
        ToyModel m = ToyModel::create(ModelConfig{}, 1);
        Rng rng(2);
        const auto adapted = apply_scheme(m, id, 4, 4.0f, rng);
        const auto wanted = module_set(id);
        std::vector<std::string> expected;
        for (const auto& info : m.layer_paths()) {
            if (wanted.count(module_of(info.path))) expected.push_back(info.path);
        }
        EXPECT_EQ(adapted, expected) << id;
        for (const auto& [path, l] : m.layers()) EXPECT_EQ(l->adapted(), wanted.count(module_of(path)) == 1) << path;
        for (const auto& [name, p] : m.base_params()) EXPECT_FALSE(p->trainable) << name;
    }
}

TEST(Schemes, HandCountedAdaptedLayers) {
    const std::map<char, std::size_t> counts = {{'a', 2}, {'b', 8}, {'c', 2}, {'d', 10},
                                                {'e', 2}, {'f', 4}, {'g', 12}, {'h', 13}};
    const ToyModel m = ToyModel::create(ModelConfig{}, 1);
    for (const auto& [id, n] : counts) EXPECT_EQ(scheme_layers(m, id).size(), n) << id;
}

TEST(Schemes, ApplyOnlyTextEncoder) {
    ToyModel m = ToyModel::create(ModelConfig{}, 3);
    Rng rng(3);
    for (const auto& p : apply_scheme(m, 'a', 2, 2.0f, rng)) EXPECT_EQ(p.rfind("text_encoder.", 0), 0u);
}

TEST(Schemes, ZeroInitIdentityForEveryScheme) {
    const ToyModel base = ToyModel::create(ModelConfig{}, 4);
    const std::vector<int> tokens = {1, 5, 9, 33, 60};
    const SynthOutput ref = base.forward(tokens);
    for (char id : kSchemeIds) {
        ToyModel m = base;
        Rng rng(5);
        apply_scheme(m, id, 4, 4.0f, rng);
        const SynthOutput o = m.forward(tokens);
        EXPECT_TRUE(o.output.bitwise_equal(ref.output)) << id;
        EXPECT_EQ(o.durations, ref.durations) << id;
    }
}

TEST(Schemes, SecondApplyIsStateErrorAndDetachRestores) {
    const ToyModel base = ToyModel::create(ModelConfig{}, 6);
    ToyModel m = base;
    Rng rng(6);
    apply_scheme(m, 'g', 4, 4.0f, rng);
    EXPECT_THROW(apply_scheme(m, 'a', 4, 4.0f, rng), StateError);
    for (auto& [path, p] : trainable_params(m)) {
        for (float& v : p->value.data()) v += 0.01f;
    }
    const std::vector<int> tokens = {2, 4, 6};
    EXPECT_FALSE(m.forward(tokens).output.bitwise_equal(base.forward(tokens).output));
    detach_all(m);
    EXPECT_FALSE(m.has_adapters());
    EXPECT_TRUE(m.forward(tokens).output.bitwise_equal(base.forward(tokens).output));
    EXPECT_EQ(m.base_checksum(), base.base_checksum());
}

TEST(Schemes, EffectiveRankCapsNarrowLayers) {
    EXPECT_EQ(effective_rank(4, 32, 1), 1);
    EXPECT_EQ(effective_rank(4, 32, 32), 4);
    EXPECT_EQ(effective_rank(64, 96, 16), 16);
    EXPECT_FLOAT_EQ(effective_alpha(8.0f, 4, 1), 2.0f);
    ToyModel m = ToyModel::create(ModelConfig{}, 7);
    Rng rng(7);
    apply_scheme(m, 'e', 4, 4.0f, rng);
    const LoraPair& p = *m.layer("duration_predictor.lin2").lora();
    EXPECT_EQ(p.rank, 1);
    EXPECT_DOUBLE_EQ(p.scale(), 1.0);
}

TEST(Schemes, ParamCountIsSumOfClosedForms) {
    const ToyModel base = ToyModel::create(ModelConfig{}, 8);
    for (char id : kSchemeIds) {
        for (int r : {1, 2, 4, 8, 16}) {
            std::size_t closed = 0;
            for (const auto& info : scheme_layers(base, id)) {
                const std::size_t re = std::min<std::size_t>(r, std::min(info.d_in_eff, info.d_out_eff));
                closed += re * (info.d_in_eff + info.d_out_eff);
            }
            EXPECT_EQ(scheme_param_count(base, id, r), closed);
            ToyModel m = base;
            Rng rng(1);
            apply_scheme(m, id, r, static_cast<float>(r), rng);
            EXPECT_EQ(trainable_param_count(m), closed) << id << " r=" << r;
        }
    }
}

TEST(Schemes, SchemeGReferenceCount) {
    // duration: 4*(32+32) + 1*(32+1); flow: 8 * 4*(16+16); decoder: 4*(120+32) + 4*(96+16)
    const ToyModel m = ToyModel::create(ModelConfig{}, 9);
    EXPECT_EQ(scheme_param_count(m, 'g', 4), 256u + 33u + 1024u + 608u + 448u);
}

TEST(Schemes, TrainableParamsEmptyWithoutAdaptersAndSkipsDisabled) {
    ToyModel m = ToyModel::create(ModelConfig{}, 10);
    EXPECT_TRUE(trainable_params(m).empty());
    Rng rng(1);
    apply_scheme(m, 'c', 2, 2.0f, rng);
    EXPECT_EQ(trainable_params(m).size(), 4u);
    m.layer("decoder.conv1").set_enabled(false);
    const auto params = trainable_params(m);
    ASSERT_EQ(params.size(), 2u);
    EXPECT_EQ(params[0].first, "decoder.conv2.lora_a");
    EXPECT_EQ(params[1].first, "decoder.conv2.lora_b");
}
