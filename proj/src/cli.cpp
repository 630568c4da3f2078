#include "emolora/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>

#include "emolora/adapterio.hpp"
#include "emolora/errors.hpp"
#include "emolora/schemes.hpp"

namespace emolora {

namespace {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw ConfigError("invalid value '" + text + "' for " + key);
    }
    return v;
}

template <class T>
std::string format_number(T v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw InternalError("number formatting failed");
    return std::string(buf, ptr);
}

struct Field {
    const char* key;
    std::function<void(LabConfig&, const std::string&)> set;
    std::function<std::string(const LabConfig&)> get;
};

template <class T>
Field field(const char* key, std::function<T&(LabConfig&)> ref) {
    return Field{key,
                 [key, ref](LabConfig& c, const std::string& v) { ref(c) = parse_number<T>(key, v); },
                 [ref](const LabConfig& c) { return format_number(ref(const_cast<LabConfig&>(c))); }};
}

const std::vector<Field>& fields() {
    using C = LabConfig;
    static const std::vector<Field> table = {
        field<int>("vocab", [](C& c) -> int& { return c.model.vocab; }),
        field<int>("hidden", [](C& c) -> int& { return c.model.hidden; }),
        field<int>("out_dim", [](C& c) -> int& { return c.model.out_dim; }),
        field<int>("flow_layers", [](C& c) -> int& { return c.model.flow_layers; }),
        field<int>("kernel", [](C& c) -> int& { return c.model.kernel; }),
        field<int>("max_duration", [](C& c) -> int& { return c.model.max_duration; }),
        field<int>("pos_channels", [](C& c) -> int& { return c.model.pos_channels; }),
        field<std::uint64_t>("seed", [](C& c) -> std::uint64_t& { return c.seed; }),
        field<std::uint64_t>("teacher_seed", [](C& c) -> std::uint64_t& { return c.teacher_seed; }),
        field<int>("teacher_utterances", [](C& c) -> int& { return c.teacher.utterances; }),
        field<int>("teacher_min_len", [](C& c) -> int& { return c.teacher.min_len; }),
        field<int>("teacher_max_len", [](C& c) -> int& { return c.teacher.max_len; }),
        field<std::uint64_t>("teacher_corpus_seed", [](C& c) -> std::uint64_t& { return c.teacher.seed; }),
        field<int>("corpus_utterances", [](C& c) -> int& { return c.corpus.utterances; }),
        field<int>("corpus_min_len", [](C& c) -> int& { return c.corpus.min_len; }),
        field<int>("corpus_max_len", [](C& c) -> int& { return c.corpus.max_len; }),
        field<std::uint64_t>("corpus_seed", [](C& c) -> std::uint64_t& { return c.corpus.seed; }),
        field<double>("lr", [](C& c) -> double& { return c.train.lr; }),
        field<double>("beta1", [](C& c) -> double& { return c.train.beta1; }),
        field<double>("beta2", [](C& c) -> double& { return c.train.beta2; }),
        field<double>("adam_eps", [](C& c) -> double& { return c.train.eps; }),
        field<int>("steps", [](C& c) -> int& { return c.train.steps; }),
        field<int>("batch", [](C& c) -> int& { return c.train.batch; }),
        field<double>("lambda_out", [](C& c) -> double& { return c.train.lambda_out; }),
        field<double>("lambda_dur", [](C& c) -> double& { return c.train.lambda_dur; }),
    };
    return table;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

using Options = std::map<std::string, std::string>;

struct Invocation {
    std::string command;
    std::string config_path;  // empty when defaults were used
    LabConfig config;
    Options options;          // flags other than --config and --seed, as given
};

const std::string* find(const Options& o, const std::string& key) {
    const auto it = o.find(key);
    return it == o.end() ? nullptr : &it->second;
}

std::string required(const Options& o, const std::string& key) {
    const std::string* v = find(o, key);
    if (!v) throw ConfigError("--" + key + " is required");
    return *v;
}

int int_option(const Options& o, const std::string& key, int fallback) {
    const std::string* v = find(o, key);
    return v ? parse_number<int>("--" + key, *v) : fallback;
}

std::vector<int> int_list(const std::string& key, const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<int>("--" + key, trim(item)));
    if (out.empty()) throw ConfigError("--" + key + " must list at least one value");
    return out;
}

char scheme_option(const Options& o, const std::string& fallback) {
    const std::string* v = find(o, "scheme");
    const std::string s = v ? *v : fallback;
    if (s.size() != 1 || !is_scheme_id(s[0])) {
        throw ConfigError("unknown scheme '" + s + "'; valid ids are a, b, c, d, e, f, g, h");
    }
    return s[0];
}

Emotion adapter_emotion(const std::string& text) {
    const Emotion e = parse_emotion(text);
    if (e == Emotion::neutral) {
        throw ConfigError("adapters are trained for angry, happy, sad or surprise, not neutral");
    }
    return e;
}

// The four adapter emotions, or the single one named by --emotion.
std::vector<Emotion> emotion_list(const Options& o) {
    const std::string* v = find(o, "emotion");
    if (!v || *v == "all") return {kAdapterEmotions.begin(), kAdapterEmotions.end()};
    return {adapter_emotion(*v)};
}

TrainConfig train_config(const Invocation& inv) {
    TrainConfig t = inv.config.train;
    t.seed = inv.config.seed;
    t.steps = int_option(inv.options, "steps", t.steps);
    return t;
}

ToyModel load_pretrained(const Options& o) {
    ToyModel base = load_base(required(o, "base"));
    if (!base.pretrained()) throw StateError("base checkpoint is not pretrained");
    return base;
}

EmotionCorpus corpus_for(const Invocation& inv, const ToyModel& base) {
    if (const std::string* path = find(inv.options, "corpus")) {
        EmotionCorpus c = load_corpus(*path);
        if (c.base_checksum != base.base_checksum()) {
            throw CompatibilityError("corpus " + *path + " was generated from a different base checkpoint");
        }
        return c;
    }
    return gen_corpus(base, inv.config.corpus);
}

void write_text(const std::filesystem::path& path, const std::string& text) { write_file(path, text); }

std::filesystem::path prepare_dir(const Options& o) {
    const std::filesystem::path dir = required(o, "out");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw InputError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

nlohmann::ordered_json manifest_json(const Invocation& inv) {
    nlohmann::ordered_json j;
    j["command"] = inv.command;
    j["config_path"] = inv.config_path;
    nlohmann::ordered_json snapshot = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config_entries(inv.config)) snapshot[k] = v;
    j["config"] = snapshot;
    j["seed"] = inv.config.seed;
    j["out"] = inv.options.count("out") ? inv.options.at("out") : "";
    nlohmann::ordered_json opts = nlohmann::ordered_json::object();
    for (const auto& [k, v] : inv.options) opts[k] = v;
    j["options"] = opts;
    return j;
}

void write_manifest(const Invocation& inv, const std::filesystem::path& path) {
    write_text(path, manifest_json(inv).dump(2) + "\n");
}

Invocation invocation_from_manifest(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    try {
        Invocation inv;
        inv.command = j.at("command").get<std::string>();
        inv.config_path = j.at("config_path").get<std::string>();
        std::string text;
        for (const auto& [k, v] : j.at("config").items()) text += k + " = " + v.get<std::string>() + "\n";
        inv.config = parse_config(text);
        if (inv.config.seed != j.at("seed").get<std::uint64_t>()) {
            throw ConfigError("manifest seed disagrees with its config snapshot");
        }
        for (const auto& [k, v] : j.at("options").items()) inv.options[k] = v.get<std::string>();
        return inv;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path.string() + " is incomplete: " + e.what());
    }
}

void cmd_pretrain(const Invocation& inv, std::ostream& out) {
    const std::filesystem::path dir = prepare_dir(inv.options);
    write_manifest(inv, dir / "manifest.json");
    const LabConfig& cfg = inv.config;
    const ToyModel teacher = ToyModel::create(cfg.model, cfg.teacher_seed);
    ToyModel base = ToyModel::create(cfg.model, cfg.seed);
    const LossCurve curve = pretrain_base(base, teacher_targets(teacher, cfg.teacher), train_config(inv));
    save_base(base, dir / "base.eela");
    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < curve.loss.size(); ++i) csv += std::to_string(i) + "," + format_number(curve.loss[i]) + "\n";
    write_text(dir / "loss_curve.csv", csv);
    out << "pretrained base: loss " << curve.loss.front() << " -> " << curve.loss.back() << ", checksum "
        << std::hex << base.base_checksum() << std::dec << "\n";
}

void cmd_gen_corpus(const Invocation& inv, std::ostream& out) {
    const std::string path = required(inv.options, "out");
    write_manifest(inv, path + ".manifest.json");
    const EmotionCorpus corpus = gen_corpus(load_pretrained(inv.options), inv.config.corpus);
    save_corpus(corpus, path);
    out << "corpus: " << corpus.utterances.size() << " utterances, " << corpus.test_indices().size()
        << " held out\n";
}

void cmd_train_adapter(const Invocation& inv, std::ostream& out) {
    const char scheme = scheme_option(inv.options, "");
    const Emotion emotion = adapter_emotion(required(inv.options, "emotion"));
    const int rank = int_option(inv.options, "rank", 4);
    const std::string* alpha_text = find(inv.options, "alpha");
    const float alpha = alpha_text ? parse_number<float>("--alpha", *alpha_text) : default_alpha(rank);
    const std::string path = required(inv.options, "out");
    const TrainConfig tc = train_config(inv);
    tc.validate();
    write_manifest(inv, path + ".manifest.json");
    const ToyModel base = load_pretrained(inv.options);
    const EmotionCorpus corpus = corpus_for(inv, base);
    const AdapterRun run = train_adapter(base, scheme, emotion, corpus, rank, alpha, tc);
    save_bundle(run.bundle, path);
    write_text(path + ".csv", reports_csv({run.report}));
    out << report_csv_header() << "\n" << report_csv_row(run.report) << "\n";
}

void emit_table(const Table& table, const std::vector<RunReport>& reports, const std::filesystem::path& dir,
                std::ostream& out) {
    write_text(dir / "runs.csv", reports_csv(reports));
    write_text(dir / "table.csv", table.csv());
    write_text(dir / "table.txt", table.text());
    out << table.text();
}

void cmd_sweep(const Invocation& inv, std::ostream& out) {
    const std::string mode = required(inv.options, "mode");
    if (mode != "rank" && mode != "scheme") throw ConfigError("--mode must be rank or scheme, got '" + mode + "'");
    const std::vector<Emotion> emotions = emotion_list(inv.options);
    const TrainConfig tc = train_config(inv);
    tc.validate();
    std::vector<int> ranks = kDefaultRanks;
    if (const std::string* r = find(inv.options, "ranks")) ranks = int_list("ranks", *r);
    const char scheme = scheme_option(inv.options, "g");
    const int rank = int_option(inv.options, "rank", 4);

    const std::filesystem::path dir = prepare_dir(inv.options);
    write_manifest(inv, dir / "manifest.json");
    const ToyModel base = load_pretrained(inv.options);
    const EmotionCorpus corpus = corpus_for(inv, base);

    std::vector<RunReport> reports;
    RateGrid grid;
    for (Emotion e : emotions) {
        const auto rows = mode == "rank" ? rank_sweep(base, scheme, e, corpus, ranks, tc)
                                         : scheme_sweep(base, e, corpus, rank, tc);
        for (const RunReport& r : rows) {
            const std::string col = r.kind == "base" ? "tts" : mode == "rank" ? rank_column(r.rank) : std::string(1, r.scheme);
            grid[e][col] = r.match_rate.at(e);
            reports.push_back(r);
        }
    }
    emit_table(mode == "rank" ? rank_table(grid, ranks) : scheme_table(grid), reports, dir, out);
}

void cmd_compare_finetune(const Invocation& inv, std::ostream& out) {
    const std::vector<Emotion> emotions = emotion_list(inv.options);
    const TrainConfig tc = train_config(inv);
    tc.validate();
    const int rank = int_option(inv.options, "rank", 4);
    const std::filesystem::path dir = prepare_dir(inv.options);
    write_manifest(inv, dir / "manifest.json");
    const ToyModel base = load_pretrained(inv.options);
    const EmotionCorpus corpus = corpus_for(inv, base);

    std::vector<RunReport> reports;
    RateGrid grid;
    for (Emotion e : emotions) {
        const RunReport g = train_adapter(base, 'g', e, corpus, rank, default_alpha(rank), tc).report;
        const RunReport ft = fine_tune_full(base, e, corpus, tc).report;
        grid[e]["g"] = g.match_rate.at(e);
        grid[e]["fine-tune"] = ft.match_rate.at(e);
        reports.push_back(g);
        reports.push_back(ft);
    }
    emit_table(comparison_table(grid), reports, dir, out);
}

// Base with the optional --adapter bundle attached.
ToyModel adapted_model(const Options& o, std::string& label) {
    ToyModel model = load_pretrained(o);
    label = "none";
    if (const std::string* path = find(o, "adapter")) {
        const AdapterBundle bundle = load_bundle(*path);
        attach_bundle(model, bundle);
        label = bundle.name;
    }
    return model;
}

void cmd_synth(const Invocation& inv, std::ostream& out) {
    const std::vector<int> tokens = int_list("tokens", required(inv.options, "tokens"));
    const std::string path = required(inv.options, "out");
    std::string label;
    const ToyModel model = adapted_model(inv.options, label);
    write_manifest(inv, path + ".manifest.json");
    const SynthOutput s = model.forward(tokens);
    write_file(path, encode(synth_to_container(s, label)));
    out << "synthesized " << s.output.rows() << " frames with adapter " << label << "\n";
}

void cmd_eval(const Invocation& inv, std::ostream& out) {
    std::string label;
    const ToyModel model = adapted_model(inv.options, label);
    const EmotionCorpus corpus = corpus_for(inv, load_pretrained(inv.options));
    out << "emotion,match_rate\n";
    for (Emotion e : kEmotions) out << emotion_name(e) << ',' << format_number(match_rate(model, e, corpus)) << "\n";
}

void execute(const Invocation& inv, std::ostream& out) {
    inv.config.validate();
    static const std::map<std::string, void (*)(const Invocation&, std::ostream&)> table = {
        {"pretrain", cmd_pretrain},       {"gen-corpus", cmd_gen_corpus}, {"train-adapter", cmd_train_adapter},
        {"sweep", cmd_sweep},             {"compare-finetune", cmd_compare_finetune},
        {"synth", cmd_synth},             {"eval", cmd_eval},
    };
    const auto it = table.find(inv.command);
    if (it == table.end()) throw ConfigError("manifest names unknown command '" + inv.command + "'");
    it->second(inv, out);
}

} // namespace

// ---------------------------------------------------------------------------

void LabConfig::validate() const {
    model.validate();
    teacher.validate(model.vocab);
    corpus.validate(model.vocab);
    train.validate();
}

LabConfig parse_config(const std::string& text) {
    LabConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::string where = "config line " + std::to_string(number) + ": ";
        const auto hash = line.find('#');
        const std::string body = trim(line.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        const auto& fs = fields();
        const auto f = std::find_if(fs.begin(), fs.end(), [&](const Field& x) { return key == x.key; });
        if (f == fs.end()) throw ConfigError(where + "unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
        try {
            f->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

LabConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::vector<std::pair<std::string, std::string>> config_entries(const LabConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const Field& f : fields()) out.emplace_back(f.key, f.get(cfg));
    return out;
}

std::string format_config(const LabConfig& cfg) {
    std::string s;
    for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
    return s;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InputError*>(&e) ||
        dynamic_cast<const LookupError*>(&e)) {
        return kExitUsage;
    }
    if (dynamic_cast<const TrainingError*>(&e)) return kExitTraining;
    if (dynamic_cast<const CompatibilityError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
        dynamic_cast<const StateError*>(&e)) {
        return kExitIncompatible;
    }
    return kExitInternal;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Emotion LoRA adapter laboratory", "emolora"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    std::string config_path, seed_text, manifest_path;
    Options opts;
    std::map<std::string, std::string> raw;

    auto add = [&](CLI::App* cmd, const std::string& name, const std::string& help) {
        cmd->add_option("--" + name, raw[cmd->get_name() + "/" + name], help);
    };
    auto common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->add_option("--seed", seed_text, "overrides the config seed");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the neutral base model");
    common(pretrain);
    add(pretrain, "out", "output directory");

    CLI::App* corpus = app.add_subcommand("gen-corpus", "generate the emotion corpus from a base");
    common(corpus);
    add(corpus, "base", "base checkpoint");
    add(corpus, "out", "corpus file");

    CLI::App* train = app.add_subcommand("train-adapter", "train one emotion adapter bundle");
    common(train);
    for (const char* n : {"base", "corpus", "scheme", "emotion", "rank", "alpha", "steps", "out"}) add(train, n, n);

    CLI::App* sweep = app.add_subcommand("sweep", "rank or scheme sweep");
    common(sweep);
    for (const char* n : {"mode", "base", "corpus", "emotion", "scheme", "rank", "ranks", "steps", "out"}) add(sweep, n, n);

    CLI::App* compare = app.add_subcommand("compare-finetune", "scheme g against full fine-tuning");
    common(compare);
    for (const char* n : {"base", "corpus", "emotion", "rank", "steps", "out"}) add(compare, n, n);

    CLI::App* synth = app.add_subcommand("synth", "synthesize one token sequence");
    for (const char* n : {"base", "adapter", "tokens", "out"}) add(synth, n, n);

    CLI::App* eval = app.add_subcommand("eval", "match rate per emotion on the held-out split");
    common(eval);
    for (const char* n : {"base", "adapter", "corpus"}) add(eval, n, n);

    CLI::App* rerun = app.add_subcommand("rerun", "repeat a run from its manifest");
    rerun->add_option("--manifest", manifest_path, "manifest.json")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        Invocation inv;
        if (rerun->parsed()) {
            inv = invocation_from_manifest(manifest_path);
        } else {
            CLI::App* cmd = app.get_subcommands().front();
            inv.command = cmd->get_name();
            for (const CLI::Option* o : cmd->get_options()) {
                const std::string name = o->get_name(false, true);
                if (o->count() == 0 || name == "--config" || name == "--seed" || name == "--help") continue;
                const std::string key = name.substr(2);
                inv.options[key] = raw.at(inv.command + "/" + key);
            }
            inv.config_path = config_path;
            if (!config_path.empty()) inv.config = load_config(config_path);
            if (!seed_text.empty()) inv.config.seed = parse_number<std::uint64_t>("--seed", seed_text);
        }
        execute(inv, out);
        return kExitOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

} // namespace emolora
