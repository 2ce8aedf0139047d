#include "editlab/runner.hpp"

#include "editlab/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace editlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_frac(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

// ---- plain-text config format ----

std::string quote(const std::string& s) { return '"' + s + '"'; }

struct ConfigReader {
    std::map<std::string, std::string> raw;
    std::set<std::string> seen;

    const std::string* find(const std::string& key) {
        auto it = raw.find(key);
        if (it == raw.end()) return nullptr;
        seen.insert(key);
        return &it->second;
    }

    template <typename T, typename F>
    void get(const std::string& key, T& out, F parse) {
        if (const std::string* v = find(key)) out = parse(*v);
    }

    void finish() const {
        for (const auto& [k, v] : raw) {
            (void)v;
            if (!seen.count(k)) throw ConfigError("unknown config key: " + k);
        }
    }
};

long parse_long(const std::string& s) {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw ConfigError("bad integer value: " + s);
    return v;
}

std::uint64_t parse_u64(const std::string& s) {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw ConfigError("bad integer value: " + s);
    return v;
}

double parse_double(const std::string& s) {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ConfigError("bad float value: " + s);
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("bad bool value: " + s);
}

std::string parse_string(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
}

std::vector<std::string> split_array(const std::string& s) {
    if (s.size() < 2 || s.front() != '[' || s.back() != ']')
        throw ConfigError("bad array value: " + s);
    std::vector<std::string> items;
    std::string cur;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        if (s[i] == ',') {
            items.push_back(cur);
            cur.clear();
        } else {
            cur += s[i];
        }
    }
    if (!cur.empty() || !items.empty()) items.push_back(cur);
    for (auto& it : items) {
        const auto b = it.find_first_not_of(" \t");
        const auto e = it.find_last_not_of(" \t");
        it = (b == std::string::npos) ? "" : it.substr(b, e - b + 1);
        if (it.empty()) throw ConfigError("empty array element in: " + s);
    }
    return items;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    ConfigReader r;
    std::istringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        // strip comments outside quotes
        bool in_quote = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_quote = !in_quote;
            if (line[i] == '#' && !in_quote) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
        r.raw[section.empty() ? key : section + "." + key] = value;
    }

    RunConfig c;
    auto geti = [&](const std::string& k, int& out) {
        r.get(k, out, [](const std::string& s) { return static_cast<int>(parse_long(s)); });
    };
    auto getu = [&](const std::string& k, std::uint64_t& out) { r.get(k, out, parse_u64); };
    auto getd = [&](const std::string& k, double& out) { r.get(k, out, parse_double); };
    auto getb = [&](const std::string& k, bool& out) { r.get(k, out, parse_bool); };
    auto gets = [&](const std::string& k, std::string& out) { r.get(k, out, parse_string); };

    getu("world.seed", c.world.seed);
    geti("world.subjects", c.world.n_subjects);
    geti("world.relations", c.world.n_relations);
    geti("world.pool_size", c.world.pool_size);
    geti("world.probes", c.world.n_probes);
    geti("world.paraphrases", c.world.paraphrases_per_relation);
    geti("world.prefixed_corpus_copies", c.world.prefixed_corpus_copies);

    geti("model.vocab_size", c.model.vocab_size);
    geti("model.d_model", c.model.d_model);
    geti("model.n_layers", c.model.n_layers);
    geti("model.n_heads", c.model.n_heads);
    geti("model.d_mlp", c.model.d_mlp);
    geti("model.max_seq_len", c.model.max_seq_len);
    getu("model.seed", c.model.seed);

    geti("pretrain.epochs", c.pretrain.epochs);
    getd("pretrain.learning_rate", c.pretrain.learning_rate);
    geti("pretrain.batch_size", c.pretrain.batch_size);
    getu("pretrain.seed", c.pretrain.seed);

    if (const std::string* v = r.find("edit.algo")) c.edit.algo = algo_from_name(parse_string(*v));
    if (const std::string* v = r.find("edit.causal_layers")) {
        c.edit.causal_layers.clear();
        for (const auto& it : split_array(*v))
            c.edit.causal_layers.push_back(static_cast<int>(parse_long(it)));
    }
    geti("edit.m", c.edit.m);
    if (const std::string* v = r.find("edit.trial_seeds")) {
        c.edit.trial_seeds.clear();
        for (const auto& it : split_array(*v)) c.edit.trial_seeds.push_back(parse_u64(it));
    }
    geti("edit.n_prefixes", c.edit.n_prefixes);
    getd("edit.lambda_c", c.edit.lambda_c);
    getd("edit.alpha_lambda", c.edit.alpha_lambda);
    getd("edit.encore_lambda_p", c.edit.encore_lambda_p);
    getd("edit.encore_lambda_n", c.edit.encore_lambda_n);
    geti("edit.cov_sample_sequences", c.edit.cov_sample_sequences);
    geti("edit.preserved_cap", c.edit.preserved_cap);

    geti("optimize.steps", c.optimize.steps);
    getd("optimize.step_size", c.optimize.step_size);
    getd("optimize.kl_weight", c.optimize.kl_weight);
    getd("optimize.neighbor_weight", c.optimize.neighbor_weight);
    getb("optimize.neighbor_prefixed", c.optimize.neighbor_prefixed);
    gets("optimize.early_stop", c.optimize.early_stop);
    getd("optimize.clamp_norm", c.optimize.clamp_norm);
    geti("optimize.workers", c.optimize.workers);

    gets("stopping.kind", c.stopping.kind);
    getd("stopping.epsilon", c.stopping.epsilon);
    geti("stopping.max_iterations", c.stopping.max_iterations);

    gets("run.output_dir", c.run.output_dir);
    gets("run.checkpoint", c.run.checkpoint);
    getb("run.pretrain_if_missing", c.run.pretrain_if_missing);
    gets("run.mode", c.run.mode);
    getd("run.collapse_factor", c.run.collapse_factor);
    getb("run.parallel_trials", c.run.parallel_trials);
    gets("run.snapshot_retention", c.run.snapshot_retention);
    getb("run.dump_targets", c.run.dump_targets);
    getb("run.dump_solver_state", c.run.dump_solver_state);

    r.finish();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string config_to_text(const RunConfig& c) {
    std::ostringstream o;
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    o << "[world]\n";
    o << "seed = " << c.world.seed << "\n";
    o << "subjects = " << c.world.n_subjects << "\n";
    o << "relations = " << c.world.n_relations << "\n";
    o << "pool_size = " << c.world.pool_size << "\n";
    o << "probes = " << c.world.n_probes << "\n";
    o << "paraphrases = " << c.world.paraphrases_per_relation << "\n";
    o << "prefixed_corpus_copies = " << c.world.prefixed_corpus_copies << "\n\n";
    o << "[model]\n";
    o << "vocab_size = " << c.model.vocab_size << "\n";
    o << "d_model = " << c.model.d_model << "\n";
    o << "n_layers = " << c.model.n_layers << "\n";
    o << "n_heads = " << c.model.n_heads << "\n";
    o << "d_mlp = " << c.model.d_mlp << "\n";
    o << "max_seq_len = " << c.model.max_seq_len << "\n";
    o << "seed = " << c.model.seed << "\n\n";
    o << "[pretrain]\n";
    o << "epochs = " << c.pretrain.epochs << "\n";
    o << "learning_rate = " << num(c.pretrain.learning_rate) << "\n";
    o << "batch_size = " << c.pretrain.batch_size << "\n";
    o << "seed = " << c.pretrain.seed << "\n\n";
    o << "[edit]\n";
    o << "algo = " << quote(algo_name(c.edit.algo)) << "\n";
    o << "causal_layers = [";
    for (std::size_t i = 0; i < c.edit.causal_layers.size(); ++i)
        o << (i ? ", " : "") << c.edit.causal_layers[i];
    o << "]\n";
    o << "m = " << c.edit.m << "\n";
    o << "trial_seeds = [";
    for (std::size_t i = 0; i < c.edit.trial_seeds.size(); ++i)
        o << (i ? ", " : "") << c.edit.trial_seeds[i];
    o << "]\n";
    o << "n_prefixes = " << c.edit.n_prefixes << "\n";
    o << "lambda_c = " << num(c.edit.lambda_c) << "\n";
    o << "alpha_lambda = " << num(c.edit.alpha_lambda) << "\n";
    o << "encore_lambda_p = " << num(c.edit.encore_lambda_p) << "\n";
    o << "encore_lambda_n = " << num(c.edit.encore_lambda_n) << "\n";
    o << "cov_sample_sequences = " << c.edit.cov_sample_sequences << "\n";
    o << "preserved_cap = " << c.edit.preserved_cap << "\n\n";
    o << "[optimize]\n";
    o << "steps = " << c.optimize.steps << "\n";
    o << "step_size = " << num(c.optimize.step_size) << "\n";
    o << "kl_weight = " << num(c.optimize.kl_weight) << "\n";
    o << "neighbor_weight = " << num(c.optimize.neighbor_weight) << "\n";
    o << "neighbor_prefixed = " << (c.optimize.neighbor_prefixed ? "true" : "false") << "\n";
    o << "early_stop = " << quote(c.optimize.early_stop) << "\n";
    o << "clamp_norm = " << num(c.optimize.clamp_norm) << "\n";
    o << "workers = " << c.optimize.workers << "\n\n";
    o << "[stopping]\n";
    o << "kind = " << quote(c.stopping.kind) << "\n";
    o << "epsilon = " << num(c.stopping.epsilon) << "\n";
    o << "max_iterations = " << c.stopping.max_iterations << "\n\n";
    o << "[run]\n";
    o << "output_dir = " << quote(c.run.output_dir) << "\n";
    o << "checkpoint = " << quote(c.run.checkpoint) << "\n";
    o << "pretrain_if_missing = " << (c.run.pretrain_if_missing ? "true" : "false") << "\n";
    o << "mode = " << quote(c.run.mode) << "\n";
    o << "collapse_factor = " << num(c.run.collapse_factor) << "\n";
    o << "parallel_trials = " << (c.run.parallel_trials ? "true" : "false") << "\n";
    o << "snapshot_retention = " << quote(c.run.snapshot_retention) << "\n";
    o << "dump_targets = " << (c.run.dump_targets ? "true" : "false") << "\n";
    o << "dump_solver_state = " << (c.run.dump_solver_state ? "true" : "false") << "\n";
    return o.str();
}

void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config: " + path);
    f << config_to_text(cfg);
}

void RunConfig::validate() const {
    model.validate();
    if (edit.m < 1) throw ConfigError("edit.m must be >= 1");
    if (edit.trial_seeds.empty()) throw ConfigError("edit.trial_seeds must not be empty");
    if (edit.n_prefixes < 1) throw ConfigError("edit.n_prefixes must be >= 1");
    if (edit.m > world.n_subjects)
        throw ConfigError("edit.m exceeds the number of facts in the world");
    spread_config().validate(model);
    optimize_spec().validate(model);
    stopping_policy().validate();
    if (run.mode != "full" && run.mode != "spread_only")
        throw ConfigError("run.mode must be full or spread_only");
    if (run.snapshot_retention != "none" && run.snapshot_retention != "last" &&
        run.snapshot_retention != "all")
        throw ConfigError("run.snapshot_retention must be none, last or all");
}

SpreadConfig RunConfig::spread_config() const {
    SpreadConfig s;
    s.algo = edit.algo;
    s.layers.layers = edit.causal_layers;
    s.lambda_c = edit.lambda_c;
    s.alpha_lambda = edit.alpha_lambda;
    s.encore_lambda_p = edit.encore_lambda_p;
    s.encore_lambda_n = edit.encore_lambda_n;
    s.cov_sample_sequences = edit.cov_sample_sequences;
    s.preserved_cap = edit.preserved_cap;
    return s;
}

OptimizeSpec RunConfig::optimize_spec() const {
    OptimizeSpec o;
    switch (edit.algo) {
        case EditAlgo::Rome:
        case EditAlgo::RRome:
            o.target_site = TargetSite::MlpOutput;
            o.layer = edit.causal_layers.front();
            break;
        case EditAlgo::Pmet:
            o.target_site = TargetSite::AttnAndMlp;
            o.layer = edit.causal_layers.back();
            break;
        default:
            o.target_site = TargetSite::HiddenState;
            o.layer = edit.causal_layers.back();
            break;
    }
    o.steps = optimize.steps;
    o.step_size = optimize.step_size;
    o.kl_weight = optimize.kl_weight;
    o.neighbor_weight = optimize.neighbor_weight;
    o.neighbor_prefixed = optimize.neighbor_prefixed;
    if (optimize.early_stop == "none")
        o.early_stop = EarlyStop::None;
    else if (optimize.early_stop == "mpes")
        o.early_stop = EarlyStop::Mpes;
    else
        throw ConfigError("optimize.early_stop must be none or mpes");
    o.clamp_norm = optimize.clamp_norm;
    o.n_workers = optimize.workers;
    return o;
}

StoppingPolicy RunConfig::stopping_policy() const {
    StoppingPolicy p;
    p.kind = stop_kind_from_name(stopping.kind);
    p.epsilon = stopping.epsilon;
    p.max_iterations = stopping.max_iterations;
    return p;
}

std::string RunConfig::checkpoint_path() const {
    if (!run.checkpoint.empty()) return run.checkpoint;
    return resolve_output_dir(run.output_dir) + "/checkpoints/pretrained.ckpt";
}

std::string resolve_output_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("run.output_dir must not be empty");
    if (fs::path(dir).is_absolute()) return dir;
    if (const char* root = std::getenv("EDITLAB_OUT_ROOT"))
        return (fs::path(root) / dir).string();
    return dir;
}

namespace {

FactWorld build_world(const RunConfig& cfg) {
    WorldSpec ws = cfg.world;
    ws.max_vocab = cfg.model.vocab_size;
    return generate_world(ws);
}

void ensure_run_dirs(const std::string& out) {
    fs::create_directories(out);
    fs::create_directories(out + "/checkpoints");
    fs::create_directories(out + "/traces");
    fs::create_directories(out + "/reports");
}

ToyLM obtain_model(const RunConfig& cfg, const FactWorld& world, const std::string& out) {
    const std::string ckpt = cfg.run.checkpoint.empty() ? out + "/checkpoints/pretrained.ckpt"
                                                        : cfg.run.checkpoint;
    if (fs::exists(ckpt)) {
        ToyLM model = load_checkpoint(ckpt);
        if (!(model.config == cfg.model))
            throw ConfigError("checkpoint config does not match [model] section: " + ckpt);
        return model;
    }
    if (!cfg.run.pretrain_if_missing)
        throw DataError("pretrained checkpoint not found: " + ckpt +
                        " (run the pretrain command or set run.pretrain_if_missing)");
    ToyLM model = ToyLM::init(cfg.model);
    pretrain(model, world.pretrain_corpus, cfg.pretrain);
    save_checkpoint(model, ckpt);
    return model;
}

json record_to_json(const IterationRecord& r) {
    json m{{"eff_acc", r.metrics.eff_acc},     {"eff_succ", r.metrics.eff_succ},
           {"gen_acc", r.metrics.gen_acc},     {"gen_succ", r.metrics.gen_succ},
           {"spec_acc", r.metrics.spec_acc},   {"spec_succ", r.metrics.spec_succ},
           {"score_acc", r.metrics.score_acc}, {"score_succ", r.metrics.score_succ},
           {"underedit_ids", r.metrics.underedit_ids},
           {"overedit_ids", r.metrics.overedit_ids}};
    return json{{"k", r.k},
                {"p_bar", r.p_bar},
                {"p_hat", r.p_hat},
                {"gap", r.gap},
                {"metrics", m},
                {"collapse_ppl", r.collapse_ppl},
                {"collapse_flagged", r.collapse_flagged},
                {"stopped_here", r.stopped_here}};
}

}  // namespace

std::string metrics_csv_header() {
    return "k,eff_acc,eff_succ,gen_acc,gen_succ,spec_acc,spec_succ,score_acc,score_succ,"
           "me_ppl,p_bar,p_hat,gap";
}

std::string metrics_csv_row(int k, const MetricsReport& m, double p_bar, double p_hat, double gap,
                            bool baseline) {
    std::string row = std::to_string(k);
    for (double v : {m.eff_acc, m.eff_succ, m.gen_acc, m.gen_succ, m.spec_acc, m.spec_succ,
                     m.score_acc, m.score_succ})
        row += ',' + fmt_frac(v);
    row += ',' + fmt_g(m.collapse_ppl);
    if (baseline) {
        row += ",,,";  // p_bar / p_hat / gap undefined before the first edit
    } else {
        row += ',' + fmt_g(p_bar) + ',' + fmt_g(p_hat) + ',' + fmt_g(gap);
    }
    return row;
}

GenDataResult cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    const std::string out = resolve_output_dir(cfg.run.output_dir);
    ensure_run_dirs(out);
    save_config(cfg, out + "/config.resolved");

    const FactWorld world = build_world(cfg);
    save_world(world, out + "/world.json");

    std::ofstream probes(out + "/probes.txt", std::ios::trunc);
    if (!probes) throw IoError("cannot write probes file");
    for (const auto& p : world.probe_utterances) probes << world.vocab.decode(p) << '\n';

    GenDataResult res;
    res.facts = static_cast<int>(world.facts.size());
    res.probes = static_cast<int>(world.probe_utterances.size());
    res.vocab = world.vocab.size();
    for (std::uint64_t seed : cfg.edit.trial_seeds) {
        const EditBatch batch = make_edit_batch(world, cfg.edit.m, cfg.edit.n_prefixes, seed);
        if (batch.shortfall > 0)
            throw DataError("trial " + std::to_string(seed) + ": only " +
                            std::to_string(batch.requests.size()) + " eligible edits for m = " +
                            std::to_string(cfg.edit.m) + " (shortfall " +
                            std::to_string(batch.shortfall) + ")");
        const std::string base = out + "/edits_trial" + std::to_string(seed);
        save_edit_batch(world, batch, base + ".jsonl", base + ".meta.json");
        res.eligible_per_trial.push_back(static_cast<int>(batch.requests.size()));
    }
    return res;
}

PretrainOutcome cmd_pretrain(const RunConfig& cfg) {
    cfg.validate();
    const std::string out = resolve_output_dir(cfg.run.output_dir);
    ensure_run_dirs(out);
    save_config(cfg, out + "/config.resolved");

    const FactWorld world = build_world(cfg);
    ToyLM model = ToyLM::init(cfg.model);
    const PretrainResult pr = pretrain(model, world.pretrain_corpus, cfg.pretrain);
    const std::string ckpt = cfg.run.checkpoint.empty() ? out + "/checkpoints/pretrained.ckpt"
                                                        : cfg.run.checkpoint;
    save_checkpoint(model, ckpt);

    PretrainOutcome res;
    res.final_nll = pr.final_nll;
    res.recall = recall_top1(model, world.recall_probes());
    res.checkpoint = ckpt;
    return res;
}

namespace {

TrialOutcome run_one_trial(const RunConfig& cfg, const FactWorld& world, const ToyLM& model,
                           const std::string& out, std::uint64_t seed) {
    TrialOutcome res;
    res.seed = seed;
    try {
        EditBatch batch = make_edit_batch(world, cfg.edit.m, cfg.edit.n_prefixes, seed);
        FilterReport frep;
        batch = filter_neighbors(model, world, batch, &frep);
        if (batch.requests.empty()) throw DataError("no requests survived neighbor filtering");

        SpreadConfig spread_cfg = cfg.spread_config();
        spread_cfg.seed = seed;
        if (cfg.run.dump_solver_state)
            spread_cfg.debug_dump_dir = out + "/traces/solver_trial" + std::to_string(seed);
        OptimizeSpec opt_spec = cfg.optimize_spec();
        opt_spec.seed = seed;

        IterativeOptions opts;
        opts.mode = (cfg.run.mode == "spread_only") ? IterativeOptions::Mode::SpreadOnly
                                                    : IterativeOptions::Mode::Full;
        opts.collapse_factor = cfg.run.collapse_factor;
        const std::string trial_tag = "trial" + std::to_string(seed);
        opts.on_iteration = [&](int k, const ToyLM& m, const std::vector<DeltaTarget>& targets,
                                const IterationRecord&) {
            if (cfg.run.snapshot_retention == "all")
                save_checkpoint(m, out + "/checkpoints/" + trial_tag + "_k" + std::to_string(k) +
                                       ".ckpt");
            if (cfg.run.dump_targets)
                save_targets(targets,
                             out + "/traces/targets_" + trial_tag + "_k" + std::to_string(k) +
                                 ".jsonl");
        };

        const IterativeResult run = run_iterative(model, world, batch, spread_cfg, opt_spec,
                                                  cfg.stopping_policy(), opts);

        // trace JSONL
        {
            std::ofstream tf(out + "/traces/" + trial_tag + ".jsonl", std::ios::trunc);
            if (!tf) throw IoError("cannot write trace file");
            json head{{"record", "header"},
                      {"trial_seed", seed},
                      {"requests", run.batch.requests.size()},
                      {"neighbors_removed", frep.neighbors_removed},
                      {"requests_dropped", frep.requests_dropped},
                      {"chosen_k", run.chosen_k},
                      {"stopped_early", run.stopped_early},
                      {"rome_sequential_batch", run.spread_report.rome_sequential_batch}};
            tf << head.dump() << '\n';
            for (const auto& r : run.trace) tf << record_to_json(r).dump() << '\n';
        }
        // CSV report: baseline row + one row per iteration
        {
            std::ofstream cf(out + "/reports/" + trial_tag + ".csv", std::ios::trunc);
            if (!cf) throw IoError("cannot write report file");
            cf << metrics_csv_header() << '\n';
            const MetricsReport base =
                evaluate_batch(model, world, run.batch, &world.probe_utterances);
            cf << metrics_csv_row(0, base, 0, 0, 0, true) << '\n';
            for (const auto& r : run.trace)
                cf << metrics_csv_row(r.k, r.metrics, r.p_bar, r.p_hat, r.gap) << '\n';
        }
        if (cfg.run.snapshot_retention == "last" || cfg.run.snapshot_retention == "all")
            save_checkpoint(run.final_model,
                            out + "/checkpoints/" + trial_tag + "_final.ckpt");

        res.chosen_k = run.chosen_k;
        res.stopped_early = run.stopped_early;
        res.requests_run = static_cast<int>(run.batch.requests.size());
        res.chosen = run.trace[static_cast<std::size_t>(run.chosen_k - 1)];
    } catch (const std::exception& e) {
        res.failed = true;
        res.error = e.what();
    }
    return res;
}

}  // namespace

RunOutcome cmd_run(const RunConfig& cfg) {
    cfg.validate();
    const std::string out = resolve_output_dir(cfg.run.output_dir);
    ensure_run_dirs(out);
    save_config(cfg, out + "/config.resolved");

    const FactWorld world = build_world(cfg);
    const ToyLM model = obtain_model(cfg, world, out);

    RunOutcome res;
    res.output_dir = out;
    res.trials.resize(cfg.edit.trial_seeds.size());

    auto work = [&](std::size_t i) {
        res.trials[i] = run_one_trial(cfg, world, model, out, cfg.edit.trial_seeds[i]);
    };
    if (cfg.run.parallel_trials && cfg.edit.trial_seeds.size() > 1) {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < cfg.edit.trial_seeds.size(); ++i) pool.emplace_back(work, i);
        for (auto& t : pool) t.join();
    } else {
        for (std::size_t i = 0; i < cfg.edit.trial_seeds.size(); ++i) work(i);
    }

    // summary: chosen-iteration row per trial, then a mean row
    std::ofstream sf(out + "/reports/summary.csv", std::ios::trunc);
    if (!sf) throw IoError("cannot write summary file");
    sf << "trial,chosen_k,stopped_early,requests," << metrics_csv_header() << '\n';
    MetricsReport mean;
    double mean_pbar = 0, mean_phat = 0, mean_gap = 0;
    int ok = 0;
    for (const auto& t : res.trials) {
        if (t.failed) {
            sf << t.seed << ",failed,,,\"" << t.error << "\"\n";
            ++res.n_failed;
            continue;
        }
        sf << t.seed << ',' << t.chosen_k << ',' << (t.stopped_early ? 1 : 0) << ','
           << t.requests_run << ','
           << metrics_csv_row(t.chosen.k, t.chosen.metrics, t.chosen.p_bar, t.chosen.p_hat,
                              t.chosen.gap)
           << '\n';
        const auto& m = t.chosen.metrics;
        mean.eff_acc += m.eff_acc;
        mean.eff_succ += m.eff_succ;
        mean.gen_acc += m.gen_acc;
        mean.gen_succ += m.gen_succ;
        mean.spec_acc += m.spec_acc;
        mean.spec_succ += m.spec_succ;
        mean.score_acc += m.score_acc;
        mean.score_succ += m.score_succ;
        mean.collapse_ppl += m.collapse_ppl;
        mean_pbar += t.chosen.p_bar;
        mean_phat += t.chosen.p_hat;
        mean_gap += t.chosen.gap;
        ++ok;
    }
    if (ok > 0) {
        const double inv = 1.0 / ok;
        mean.eff_acc *= inv;
        mean.eff_succ *= inv;
        mean.gen_acc *= inv;
        mean.gen_succ *= inv;
        mean.spec_acc *= inv;
        mean.spec_succ *= inv;
        mean.score_acc *= inv;
        mean.score_succ *= inv;
        mean.collapse_ppl *= inv;
        sf << "mean,,," << ','
           << metrics_csv_row(0, mean, mean_pbar * inv, mean_phat * inv, mean_gap * inv) << '\n';
    }
    return res;
}

MetricsReport cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    const std::string out = resolve_output_dir(cfg.run.output_dir);
    ensure_run_dirs(out);

    const FactWorld world = build_world(cfg);
    const ToyLM model = obtain_model(cfg, world, out);
    EditBatch batch = make_edit_batch(world, cfg.edit.m, cfg.edit.n_prefixes,
                                      cfg.edit.trial_seeds.front());
    batch = filter_neighbors(model, world, batch);
    if (batch.requests.empty()) throw DataError("no requests survived neighbor filtering");
    const MetricsReport rep = evaluate_batch(model, world, batch, &world.probe_utterances);

    std::ofstream cf(out + "/reports/eval.csv", std::ios::trunc);
    if (!cf) throw IoError("cannot write eval report");
    cf << metrics_csv_header() << '\n';
    cf << metrics_csv_row(0, rep, 0, 0, 0, true) << '\n';
    return rep;
}

SweepOutcome cmd_sweep_stopping(const RunConfig& cfg) {
    cfg.validate();
    const std::string out = resolve_output_dir(cfg.run.output_dir);
    ensure_run_dirs(out);
    save_config(cfg, out + "/config.resolved");

    const FactWorld world = build_world(cfg);
    const ToyLM model = obtain_model(cfg, world, out);

    std::vector<StoppingPolicy> policies;
    for (StopKind kind :
         {StopKind::GapBelowEps, StopKind::MonotonicGap, StopKind::ConsecutiveSpreadGap}) {
        StoppingPolicy p;
        p.kind = kind;
        p.epsilon = cfg.stopping.epsilon;
        p.max_iterations = cfg.stopping.max_iterations;
        policies.push_back(p);
    }

    SweepOutcome res;
    for (std::uint64_t seed : cfg.edit.trial_seeds) {
        EditBatch batch = make_edit_batch(world, cfg.edit.m, cfg.edit.n_prefixes, seed);
        batch = filter_neighbors(model, world, batch);
        if (batch.requests.empty()) throw DataError("no requests survived neighbor filtering");
        SpreadConfig spread_cfg = cfg.spread_config();
        spread_cfg.seed = seed;
        OptimizeSpec opt_spec = cfg.optimize_spec();
        opt_spec.seed = seed;

        const auto outcomes = compare_stopping(model, world, batch, spread_cfg, opt_spec,
                                               policies, cfg.stopping.max_iterations);
        for (const auto& oc : outcomes) {
            res.rows.push_back({seed, stop_kind_name(oc.policy.kind), oc.chosen_k,
                                oc.record.metrics.score_acc, oc.record.metrics.score_succ,
                                oc.record.gap});
        }
    }

    res.table_path = out + "/reports/stopping_sweep.csv";
    std::ofstream f(res.table_path, std::ios::trunc);
    if (!f) throw IoError("cannot write stopping sweep table");
    f << "trial,policy,chosen_k,score_acc,score_succ,gap\n";
    for (const auto& r : res.rows)
        f << r.trial_seed << ',' << r.policy << ',' << r.chosen_k << ',' << fmt_frac(r.score_acc)
          << ',' << fmt_frac(r.score_succ) << ',' << fmt_g(r.gap) << '\n';
    return res;
}

std::string cmd_report(const std::string& run_dir) {
    const std::string out = resolve_output_dir(run_dir);
    std::ostringstream o;
    const std::string summary = out + "/reports/summary.csv";
    if (fs::exists(summary)) {
        std::ifstream f(summary);
        o << "# " << summary << "\n" << f.rdbuf() << "\n";
    }
    std::vector<fs::path> traces;
    if (fs::exists(out + "/traces"))
        for (const auto& e : fs::directory_iterator(out + "/traces"))
            if (e.path().extension() == ".jsonl" &&
                e.path().filename().string().rfind("trial", 0) == 0)
                traces.push_back(e.path());
    std::sort(traces.begin(), traces.end());
    for (const auto& p : traces) {
        std::ifstream f(p);
        std::string line;
        o << "# " << p.string() << "\n";
        o << metrics_csv_header() << "\n";
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("k")) continue;
            MetricsReport m;
            const auto& mm = j.at("metrics");
            m.eff_acc = mm.at("eff_acc").get<double>();
            m.eff_succ = mm.at("eff_succ").get<double>();
            m.gen_acc = mm.at("gen_acc").get<double>();
            m.gen_succ = mm.at("gen_succ").get<double>();
            m.spec_acc = mm.at("spec_acc").get<double>();
            m.spec_succ = mm.at("spec_succ").get<double>();
            m.score_acc = mm.at("score_acc").get<double>();
            m.score_succ = mm.at("score_succ").get<double>();
            m.collapse_ppl = j.at("collapse_ppl").get<double>();
            o << metrics_csv_row(j.at("k").get<int>(), m, j.at("p_bar").get<double>(),
                                 j.at("p_hat").get<double>(), j.at("gap").get<double>())
              << "\n";
        }
    }
    if (o.str().empty()) throw DataError("no reports found under " + out);
    return o.str();
}

}  // namespace editlab
