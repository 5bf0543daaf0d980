#include "aoar/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "aoar/corpus.hpp"
#include "aoar/errors.hpp"
#include "aoar/evalsuite.hpp"
#include "aoar/kernels.hpp"
#include "aoar/model.hpp"
#include "aoar/objectives.hpp"
#include "aoar/ordering.hpp"
#include "aoar/sampler.hpp"

#ifndef AOAR_CODE_VERSION
#define AOAR_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace aoar::cli {

namespace {

std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

std::string utc_now(const char* fmt) {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::strftime(buf, sizeof buf, fmt, &tm);
    return buf;
}

json load_config(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read config " + path);
    }
    try {
        json j = json::parse(in);
        if (!j.is_object()) {
            throw ConfigError("config must be a JSON object");
        }
        return j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
}

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
            throw ConfigError("unknown key '" + k + "' in " + where);
        }
    }
}

// Flag values recorded here take precedence over the config document.
struct Overrides {
    std::vector<std::pair<json::json_pointer, json>> values;
    void set(const std::string& pointer, json v) { values.emplace_back(json::json_pointer(pointer), std::move(v)); }
    void apply(json& j) const {
        for (const auto& [p, v] : values) {
            j[p] = v;
        }
    }
};

class Run {
public:
    Run(std::string command, const std::string& out_flag, const std::string& name, const json& resolved)
        : command_(std::move(command)), started_(utc_now("%Y-%m-%dT%H:%M:%SZ")) {
        fs::path root = out_flag;
        if (root.empty()) {
            const char* env = std::getenv(kOutputRootEnv);
            root = env && *env ? fs::path(env) : fs::path("runs");
        }
        const std::string text = resolved.dump(2) + "\n";
        hash_ = hex64(fnv1a64(text));
        std::string base = name.empty() ? command_ + "-" + utc_now("%Y%m%dT%H%M%S") + "-" + hash_.substr(0, 8) : name;
        root_ = root;
        dir_ = root / base;
        for (int i = 1; fs::exists(dir_); ++i) {
            dir_ = root / (base + "-" + std::to_string(i));
        }
        fs::create_directories(dir_);
        write_text_file(dir_ / "config.json", text);
        artifacts_.push_back("config.json");
    }

    const fs::path& dir() const { return dir_; }
    const fs::path& root() const { return root_; }
    fs::path artifact(const std::string& rel) {
        artifacts_.push_back(rel);
        const fs::path p = dir_ / rel;
        if (p.has_parent_path()) {
            fs::create_directories(p.parent_path());
        }
        return p;
    }
    void set_parent(std::string p) { parent_ = std::move(p); }

    void finish(const json& metrics, const std::string& status = "ok", const std::string& error = "") {
        json m = {{"command", command_},
                  {"status", status},
                  {"config_hash", hash_},
                  {"code_version", AOAR_CODE_VERSION},
                  {"start", started_},
                  {"end", utc_now("%Y-%m-%dT%H:%M:%SZ")},
                  {"artifacts", artifacts_},
                  {"metrics", metrics}};
        if (!parent_.empty()) {
            m["parent_manifest"] = parent_;
        }
        if (!error.empty()) {
            m["error"] = error;
        }
        write_text_file(dir_ / "manifest.json", m.dump(2) + "\n");
    }

private:
    std::string command_;
    std::string started_;
    std::string hash_;
    fs::path root_;
    fs::path dir_;
    std::vector<std::string> artifacts_;
    std::string parent_;
};

// Runs `body`; on failure the manifest records the error before rethrowing.
template <class F>
void guarded(Run& run, F&& body) {
    try {
        run.finish(body());
    } catch (const std::exception& e) {
        try {
            run.finish(json::object(), "failed", e.what());
        } catch (...) {
        }
        throw;
    }
}

struct CorpusData {
    Vocabulary vocab;
    std::vector<int> ids;
    std::uint64_t hash = 0;
};

CorpusData load_corpus(const std::string& path, const Vocabulary* vocab) {
    if (path.empty()) {
        throw ConfigError("a corpus path is required");
    }
    const std::string text = read_text_file(path);
    CorpusData c;
    c.vocab = vocab ? *vocab : build_vocab(text);
    c.ids = c.vocab.encode(text);
    c.hash = fnv1a64(text);
    return c;
}

DatasetSplits packed_splits(const CorpusData& c, int ctx_len, double validation_fraction) {
    PackedDataset all = pack_blocks(c.ids, ctx_len);
    all.corpus_hash = c.hash;
    DatasetSplits s = split_train_validation(all, validation_fraction);
    s.train.corpus_hash = c.hash;
    s.validation.corpus_hash = c.hash;
    return s;
}

Vocabulary checkpoint_vocab(const Checkpoint& ck) {
    if (!ck.extra.contains("vocab")) {
        throw ConfigError("checkpoint carries no vocabulary");
    }
    return Vocabulary::from_json(ck.extra["vocab"]);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

json int_list(const std::string& s) {
    json a = json::array();
    for (const auto& x : split_list(s)) {
        a.push_back(std::stoi(x));
    }
    return a;
}

void set_deterministic(const json& cfg) { kernels::set_deterministic(cfg.value("deterministic", false)); }

// ---------------------------------------------------------------- train

json resolve_train(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg, {"corpus", "model", "train", "seed", "deterministic", "validation_fraction", "init_checkpoint"},
                 "train config");
    json r;
    r["corpus"] = cfg.value("corpus", std::string());
    r["seed"] = cfg.value("seed", 0);
    r["deterministic"] = cfg.value("deterministic", false);
    r["validation_fraction"] = cfg.value("validation_fraction", 0.05);
    r["init_checkpoint"] = cfg.value("init_checkpoint", std::string());
    json model = cfg.value("model", json::object());
    ModelConfig mc = ModelConfig::from_json(model);
    if (!model.contains("vocab_size") && !r["corpus"].get<std::string>().empty()) {
        mc.vocab_size = build_vocab(read_text_file(r["corpus"].get<std::string>())).size();
    }
    mc.validate();
    r["model"] = mc.to_json();
    json train = cfg.value("train", json::object());
    if (!train.contains("seed")) {
        train["seed"] = r["seed"];
    }
    r["train"] = TrainConfig::from_json(train).to_json();
    return r;
}

json cmd_train(const json& cfg, Run& run, std::ostream& out) {
    set_deterministic(cfg);
    const CorpusData corpus = load_corpus(cfg["corpus"], nullptr);
    ModelConfig mc = ModelConfig::from_json(cfg["model"]);
    if (mc.vocab_size != corpus.vocab.size()) {
        throw ConfigError("model.vocab_size must equal the corpus vocabulary size (" +
                          std::to_string(corpus.vocab.size()) + ")");
    }
    const TrainConfig tc = TrainConfig::from_json(cfg["train"]);
    const DatasetSplits splits = packed_splits(corpus, mc.ctx_len, cfg["validation_fraction"]);
    // Packed splits are shared between runs through a cache keyed by corpus and ctx_len.
    const fs::path cache = run.root() / "cache";
    fs::create_directories(cache);
    for (const PackedDataset* ds : {&splits.train, &splits.validation}) {
        const fs::path p = cache / (hex64(corpus.hash) + "-" + std::to_string(mc.ctx_len) + "-" +
                                    std::to_string(static_cast<int>(std::lround(1000 * cfg["validation_fraction"].get<double>()))) +
                                    "-" + std::string(to_string(ds->split)) + ".pak");
        if (!fs::exists(p)) {
            write_packed(p, *ds);
        }
    }
    write_text_file(run.artifact("vocab.json"), corpus.vocab.to_json().dump(2) + "\n");

    std::optional<Transformer> model;
    const std::string init = cfg["init_checkpoint"];
    if (!init.empty()) {
        const Checkpoint parent = load_checkpoint(init);
        if (!(parent.config == mc)) {
            throw ConfigError("init_checkpoint config differs from model config");
        }
        model.emplace(model_from_checkpoint(parent));
        const fs::path pm = fs::path(init).parent_path().parent_path() / "manifest.json";
        run.set_parent(fs::exists(pm) ? fs::absolute(pm).string() : fs::absolute(init).string());
    } else {
        model.emplace(mc, derive_seed(cfg["seed"].get<std::uint64_t>(), {0x1417}));
    }

    const fs::path metrics = run.artifact("metrics.jsonl");
    const json extra = {{"vocab", corpus.vocab.to_json()}, {"train", tc.to_json()}};
    auto save = [&](const std::string& name, const std::vector<float>& params, std::int64_t step,
                    std::optional<double> decay) {
        Checkpoint ck;
        ck.config = mc;
        ck.step = step;
        ck.ema_decay = decay;
        ck.extra = extra;
        ck.params = params;
        save_checkpoint(run.artifact("checkpoints/" + name), ck);
    };
    Trainer trainer(*model, tc);
    const TrainResult res = trainer.run(
        splits.train, splits.validation,
        [&](const EvalRecord& rec) {
            append_jsonl(metrics, rec.to_json());
            out << "step " << rec.step << "  val_anyorder " << std::fixed << std::setprecision(4) << rec.val_anyorder_nll;
            if (rec.val_l2r_nll) {
                out << "  val_l2r " << *rec.val_l2r_nll;
            }
            if (rec.train_loss) {
                out << "  train " << *rec.train_loss;
            }
            out << '\n' << std::defaultfloat;
        },
        [&](std::int64_t step, const Transformer& m, const std::vector<EmaState>& emas) {
            const bool final = step == tc.total_steps;
            const std::string stem = final ? "final" : "step_" + std::to_string(step);
            save(stem + ".ckpt", {m.params().begin(), m.params().end()}, step, std::nullopt);
            for (const auto& e : emas) {
                std::ostringstream d;
                d << e.decay;
                save(stem + ".ema_" + d.str() + ".ckpt", e.weights(), step, e.decay);
            }
        });
    return res.records.back().to_json();
}

// ---------------------------------------------------------------- eval

json resolve_eval(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg,
                 {"checkpoint", "corpus", "modes", "ensemble_sizes", "num_orders", "eval_blocks", "block_len", "seed",
                  "ensemble_seed", "deterministic", "validation_fraction", "anyorder_estimator", "svg"},
                 "eval config");
    json r;
    r["checkpoint"] = cfg.value("checkpoint", std::string());
    r["corpus"] = cfg.value("corpus", std::string());
    r["modes"] = cfg.value("modes", json::array({"l2r", "any_order"}));
    r["ensemble_sizes"] = cfg.value("ensemble_sizes", json::array({1, 8}));
    r["num_orders"] = cfg.value("num_orders", 1);
    r["eval_blocks"] = cfg.value("eval_blocks", 32);
    r["block_len"] = cfg.value("block_len", 0);
    r["seed"] = cfg.value("seed", 1234);
    r["ensemble_seed"] = cfg.value("ensemble_seed", 99);
    r["deterministic"] = cfg.value("deterministic", true);
    r["validation_fraction"] = cfg.value("validation_fraction", 0.05);
    r["anyorder_estimator"] = cfg.value("anyorder_estimator", std::string("auto"));
    r["svg"] = cfg.value("svg", true);
    for (const auto& m : r["modes"]) {
        const std::string s = m.get<std::string>();
        if (s != "l2r" && s != "any_order" && s != "ensemble") {
            throw ConfigError("unknown eval mode '" + s + "'");
        }
    }
    const std::string est = r["anyorder_estimator"];
    if (est != "auto" && est != "chain" && est != "mdm") {
        throw ConfigError("anyorder_estimator must be auto, chain or mdm");
    }
    return r;
}

json cmd_eval(const json& cfg, Run& run, std::ostream& out) {
    set_deterministic(cfg);
    const Checkpoint ck = load_checkpoint(cfg["checkpoint"].get<std::string>());
    const Transformer model = model_from_checkpoint(ck);
    const Vocabulary vocab = checkpoint_vocab(ck);
    const CorpusData corpus = load_corpus(cfg["corpus"], &vocab);
    // Validation blocks are the held-out tail at the training ctx_len; shorter
    // evaluation lengths use each block's prefix.
    const DatasetSplits splits = packed_splits(corpus, ck.config.ctx_len, cfg["validation_fraction"]);
    const int block_len = cfg["block_len"].get<int>() > 0 ? cfg["block_len"].get<int>() : ck.config.ctx_len;
    if (block_len > ck.config.ctx_len) {
        throw ConfigError("block_len exceeds the checkpoint ctx_len");
    }
    std::vector<Block> blocks;
    for (Block b : dataset_blocks(splits.validation, cfg["eval_blocks"].get<std::size_t>())) {
        blocks.push_back(b.first(static_cast<std::size_t>(block_len)));
    }
    const std::string id = fs::path(cfg["checkpoint"].get<std::string>()).filename().string();
    const int orders = cfg["num_orders"];
    const std::uint64_t seed = cfg["seed"];
    std::string est = cfg["anyorder_estimator"];
    if (est == "auto") {
        est = model.config().is_decoder() ? "chain" : "mdm";
    }
    std::vector<PplReport> reports;
    std::vector<SeriesPoint> series;
    for (const auto& m : cfg["modes"]) {
        const std::string mode = m;
        if (mode == "l2r") {
            if (model.config().is_decoder()) {
                reports.push_back(l2r_ppl(model, blocks, "validation", id));
            }
        } else if (mode == "any_order") {
            if (est == "chain") {
                reports.push_back(anyorder_ppl(model, blocks, orders, seed, "validation", id));
            } else {
                // One masking draw scores n - l + 1 tokens; use n draws per order
                // so both estimators spend comparable forwards per block.
                reports.push_back(make_report(summarize(mdm_samples(model, blocks, orders * block_len, seed)),
                                              "validation", PplMode::any_order, 1, id));
            }
        } else if (model.config().is_decoder()) {
            for (const auto& mm : cfg["ensemble_sizes"]) {
                const EnsembleConfig ec{mm.get<int>(), true, cfg["ensemble_seed"].get<std::uint64_t>()};
                reports.push_back(ensemble_ppl(model, blocks, orders, ec, seed, "validation", id));
                series.push_back({static_cast<double>(ec.members), reports.back().ppl});
            }
        }
    }
    write_text_file(run.artifact("report.csv"), reports_csv(reports));
    const std::string table = reports_table(reports);
    write_text_file(run.artifact("report.txt"), table);
    out << table;
    if (cfg["svg"].get<bool>() && series.size() >= 2) {
        write_text_file(run.artifact("ensemble.svg"),
                        line_chart_svg("Ensemble size vs perplexity", "members M", "perplexity", series));
    }
    json metrics = json::array();
    for (const auto& r : reports) {
        metrics.push_back({{"mode", r.mode_label()}, {"nll", r.nll}, {"ppl", r.ppl}, {"stderr", r.std_error}});
    }
    return {{"reports", metrics}};
}

// ---------------------------------------------------------------- sample

json resolve_sample(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg, {"checkpoint", "generation", "num_samples", "trace", "deterministic", "seed"}, "sample config");
    json r;
    r["checkpoint"] = cfg.value("checkpoint", std::string());
    r["num_samples"] = cfg.value("num_samples", 1);
    r["trace"] = cfg.value("trace", true);
    r["deterministic"] = cfg.value("deterministic", true);
    json g = cfg.value("generation", json::object());
    if (cfg.contains("seed") && !g.contains("seed")) {
        g["seed"] = cfg["seed"];
    }
    r["generation"] = GenerationConfig::from_json(g).to_json();
    r["seed"] = r["generation"]["seed"];
    return r;
}

json cmd_sample(const json& cfg, Run& run, std::ostream& out) {
    set_deterministic(cfg);
    const Checkpoint ck = load_checkpoint(cfg["checkpoint"].get<std::string>());
    const Transformer model = model_from_checkpoint(ck);
    const Vocabulary vocab = checkpoint_vocab(ck);
    const GenerationConfig base = GenerationConfig::from_json(cfg["generation"]);
    const int count = cfg["num_samples"];
    const fs::path samples_path = run.artifact("samples.txt");
    std::optional<fs::path> trace_path;
    if (cfg["trace"].get<bool>()) {
        trace_path = run.artifact("trace.jsonl");
        fs::remove(*trace_path);
    }
    std::ostringstream text;
    double total_ms = 0.0;
    for (int i = 0; i < count; ++i) {
        GenerationConfig g = base;
        g.seed = count == 1 ? base.seed : derive_seed(base.seed, {static_cast<std::uint64_t>(i)});
        const GenerationResult res = generate(model, g);
        const std::string s = vocab.decode(res.tokens);
        text << s << "\n";
        out << s << "\n";
        for (const auto& step : res.trace) {
            total_ms += step.wall_ms;
            if (trace_path) {
                json row = step.to_json();
                row["sample"] = i;
                append_jsonl(*trace_path, row);
            }
        }
    }
    write_text_file(samples_path, text.str());
    return {{"num_samples", count}, {"total_ms", total_ms}};
}

// ---------------------------------------------------------------- bench

json resolve_bench(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg, {"checkpoint", "model", "n_grid", "step_grid", "engines", "repeats", "warmup", "seed",
                       "deterministic"},
                 "bench config");
    json r;
    r["checkpoint"] = cfg.value("checkpoint", std::string());
    if (r["checkpoint"].get<std::string>().empty()) {
        ModelConfig mc;
        mc.ctx_len = 512;
        mc.vocab_size = 98;
        json m = mc.to_json();
        for (const auto& [k, v] : cfg.value("model", json::object()).items()) {
            m[k] = v;
        }
        const ModelConfig bench_cfg = ModelConfig::from_json(m);
        bench_cfg.validate();
        r["model"] = bench_cfg.to_json();
    } else if (cfg.contains("model")) {
        throw ConfigError("bench takes either a checkpoint or a model config, not both");
    }
    r["n_grid"] = cfg.value("n_grid", json::array({64, 128, 256, 512}));
    r["step_grid"] = cfg.value("step_grid", json::array());
    r["engines"] = cfg.value("engines", json::array({"decoder_cached", "decoder_full_recompute"}));
    r["repeats"] = cfg.value("repeats", 5);
    r["warmup"] = cfg.value("warmup", 1);
    r["seed"] = cfg.value("seed", 0);
    r["deterministic"] = cfg.value("deterministic", false);
    for (const auto& e : r["engines"]) {
        parse_engine(e.get<std::string>());
    }
    return r;
}

json cmd_bench(const json& cfg, Run& run, std::ostream& out) {
    set_deterministic(cfg);
    const std::string path = cfg["checkpoint"];
    const Transformer model = path.empty() ? Transformer(ModelConfig::from_json(cfg["model"]),
                                                         derive_seed(cfg["seed"].get<std::uint64_t>(), {0xbe}))
                                           : model_from_checkpoint(load_checkpoint(path));
    BenchOptions o;
    o.n_grid = cfg["n_grid"].get<std::vector<int>>();
    o.step_grid = cfg["step_grid"].get<std::vector<int>>();
    for (const auto& e : cfg["engines"]) {
        o.engines.push_back(parse_engine(e.get<std::string>()));
    }
    o.repeats = cfg["repeats"];
    o.warmup = cfg["warmup"];
    o.seed = cfg["seed"];
    const BenchReport rep = speed_bench(model, o);
    write_text_file(run.artifact("bench.csv"), rep.to_csv());
    json slopes = json::object();
    for (const auto& [e, s] : rep.slopes) {
        slopes[to_string(e)] = s;
        out << to_string(e) << " slope " << std::setprecision(3) << s << '\n';
    }
    json summary = {{"slopes", slopes}};
    const int nmax = *std::max_element(o.n_grid.begin(), o.n_grid.end());
    const double sp = rep.speedup(Engine::decoder_cached, Engine::decoder_full_recompute, nmax, nmax);
    if (sp > 0) {
        summary["speedup_at_max_n"] = {{"n", nmax}, {"speedup", sp}};
        out << "speedup at n=T=" << nmax << ": " << sp << "x\n";
    }
    write_text_file(run.artifact("summary.json"), summary.dump(2) + "\n");
    return summary;
}

// ---------------------------------------------------------------- count

json resolve_count(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg, {"n", "enumerate"}, "count config");
    json r;
    r["n"] = cfg.value("n", 8);
    r["enumerate"] = cfg.value("enumerate", false);
    if (r["n"].get<int>() < 1) {
        throw ConfigError("n must be >= 1");
    }
    return r;
}

json cmd_count(const json& cfg, Run& run, std::ostream& out) {
    const int n = cfg["n"];
    const BigInt inv = count_order_invariant(n);
    const BigInt dep = count_order_dependent(n);
    const BigRational ratio = dependent_factorial_ratio(n);
    json result = {{"n", n},
                   {"order_invariant", inv.str()},
                   {"order_dependent", dep.str()},
                   {"dependent_over_factorial", static_cast<double>(ratio)}};
    out << "n                         " << n << '\n';
    out << "order-invariant count     " << inv << '\n';
    out << "order-dependent count     " << dep << '\n';
    out << "dependent / n!            " << std::setprecision(12) << static_cast<double>(ratio) << "  (e = "
        << std::exp(1.0) << ")\n";
    if (cfg["enumerate"].get<bool>()) {
        if (n > kEnumerationLimit) {
            throw ConfigError("enumeration bound exceeded (n <= " + std::to_string(kEnumerationLimit) + ")");
        }
        const std::uint64_t ei = enumerate_conditionals(n, ConditionalMode::invariant);
        const std::uint64_t ed = enumerate_conditionals(n, ConditionalMode::dependent);
        const bool ok = BigInt(ei) == inv && BigInt(ed) == dep;
        result["enumerated_invariant"] = ei;
        result["enumerated_dependent"] = ed;
        result["oracle_match"] = ok;
        out << "enumerated invariant      " << ei << '\n';
        out << "enumerated dependent      " << ed << '\n';
        out << "oracle                    " << (ok ? "match" : "MISMATCH") << '\n';
        if (!ok) {
            throw NumericalError("closed forms disagree with enumeration");
        }
    }
    write_text_file(run.artifact("counts.json"), result.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------- probe

json resolve_probe(json cfg, const Overrides& ov) {
    ov.apply(cfg);
    require_keys(cfg,
                 {"checkpoint", "corpus", "budget", "block_len", "blocks", "seed", "weighting", "deterministic",
                  "validation_fraction"},
                 "probe config");
    json r;
    r["checkpoint"] = cfg.value("checkpoint", std::string());
    r["corpus"] = cfg.value("corpus", std::string());
    r["budget"] = cfg.value("budget", 10000);
    r["block_len"] = cfg.value("block_len", 6);
    r["blocks"] = cfg.value("blocks", 32);
    r["seed"] = cfg.value("seed", 7);
    r["weighting"] = cfg.value("weighting", std::string("elbo"));
    r["deterministic"] = cfg.value("deterministic", false);
    r["validation_fraction"] = cfg.value("validation_fraction", 0.05);
    const std::string w = r["weighting"];
    if (w != "elbo" && w != "unweighted") {
        throw ConfigError("weighting must be elbo or unweighted");
    }
    return r;
}

json cmd_probe(const json& cfg, Run& run, std::ostream& out) {
    set_deterministic(cfg);
    const Checkpoint ck = load_checkpoint(cfg["checkpoint"].get<std::string>());
    const Transformer model = model_from_checkpoint(ck);
    const int n = cfg["block_len"];
    const int count = cfg["blocks"];
    if (n < 2 || n > ck.config.ctx_len || count < 1) {
        throw ConfigError("probe needs 2 <= block_len <= ctx_len and blocks >= 1");
    }
    std::vector<std::vector<int>> data;
    const std::string corpus_path = cfg["corpus"];
    if (!corpus_path.empty()) {
        const Vocabulary vocab = checkpoint_vocab(ck);
        const CorpusData corpus = load_corpus(corpus_path, &vocab);
        const DatasetSplits s = packed_splits(corpus, n, cfg["validation_fraction"]);
        for (std::size_t i = 0; i < s.validation.size() && data.size() < static_cast<std::size_t>(count); ++i) {
            data.push_back(s.validation.block_ids(i));
        }
    } else {
        Rng rng(derive_seed(cfg["seed"].get<std::uint64_t>(), {0xda7a}));
        for (int b = 0; b < count; ++b) {
            std::vector<int> block(static_cast<std::size_t>(n));
            for (auto& t : block) {
                t = rng.below(model.mask_id());
            }
            data.push_back(std::move(block));
        }
    }
    std::vector<Block> blocks(data.begin(), data.end());
    const MdmWeighting w = cfg["weighting"] == "elbo" ? MdmWeighting::elbo : MdmWeighting::unweighted;
    const ProbeReport rep = equivalence_probe(model, blocks, cfg["budget"], cfg["seed"], w);
    const json j = rep.to_json();
    write_text_file(run.artifact("probe.json"), j.dump(2) + "\n");
    out << std::setprecision(6) << "any-order  " << rep.aoar.nll_per_token << " +- " << rep.aoar.std_error << '\n'
        << "masked     " << rep.mdm.nll_per_token << " +- " << rep.mdm.std_error << '\n'
        << "z " << rep.z_score << (rep.pass ? "  PASS (z < 3)" : "  FAIL (z >= 3)") << '\n';
    return j;
}

// ---------------------------------------------------------------- dispatch

using Resolver = json (*)(json, const Overrides&);
using Command = json (*)(const json&, Run&, std::ostream&);

struct Common {
    std::string config;
    std::string out;
    std::string run_name;
};

void add_common(CLI::App* sub, Common& c, Overrides& ov) {
    sub->add_option("-c,--config", c.config, "JSON config file");
    sub->add_option("-o,--out", c.out, std::string("Output root (default $") + kOutputRootEnv + " or ./runs)");
    sub->add_option("--run-name", c.run_name, "Run directory name");
    sub->add_option_function<std::uint64_t>("--seed", [&ov](std::uint64_t s) { ov.set("/seed", s); }, "Master seed");
}

void flag_str(CLI::App* sub, Overrides& ov, const std::string& name, const std::string& pointer,
              const std::string& help) {
    sub->add_option_function<std::string>(name, [&ov, pointer](const std::string& v) { ov.set(pointer, v); }, help);
}

template <class T>
void flag_num(CLI::App* sub, Overrides& ov, const std::string& name, const std::string& pointer,
              const std::string& help) {
    sub->add_option_function<T>(name, [&ov, pointer](const T& v) { ov.set(pointer, v); }, help);
}

void flag_bool(CLI::App* sub, Overrides& ov, const std::string& name, const std::string& pointer,
               const std::string& help) {
    sub->add_option_function<bool>(name, [&ov, pointer](bool v) { ov.set(pointer, v); }, help);
}

void flag_ints(CLI::App* sub, Overrides& ov, const std::string& name, const std::string& pointer,
               const std::string& help) {
    sub->add_option_function<std::string>(name, [&ov, pointer](const std::string& v) { ov.set(pointer, int_list(v)); },
                                           help);
}

void flag_strs(CLI::App* sub, Overrides& ov, const std::string& name, const std::string& pointer,
               const std::string& help) {
    sub->add_option_function<std::string>(
        name, [&ov, pointer](const std::string& v) { ov.set(pointer, split_list(v)); }, help);
}

}  // namespace

json parse_policy_flag(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream in(spec);
    for (std::string p; std::getline(in, p, ':');) {
        parts.push_back(p);
    }
    if (parts.empty()) {
        throw ConfigError("empty order policy");
    }
    const std::string& kind = parts[0];
    json j = {{"kind", kind}};
    try {
        if (kind == "fixed_random" && parts.size() > 1) {
            j["seed"] = std::stoull(parts[1]);
        } else if (kind == "blockwise") {
            if (parts.size() > 1) {
                j["block_size"] = std::stoi(parts[1]);
            }
            if (parts.size() > 2) {
                j["seed"] = std::stoull(parts[2]);
            }
        } else if (kind == "hybrid" && parts.size() > 1) {
            j["identity_weight"] = std::stod(parts[1]);
            if (!(j["identity_weight"] >= 0.0 && j["identity_weight"] <= 1.0)) {
                throw ConfigError("hybrid identity weight must lie in [0, 1]");
            }
        }
    } catch (const std::logic_error&) {
        throw ConfigError("malformed order policy '" + spec + "'");
    }
    try {
        OrderPolicy::from_json(j).validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return j;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Any-order autoregressive and masked-diffusion desk lab", "aoar_lab"};
    app.require_subcommand(1);
    Common common;
    Overrides ov;
    std::map<CLI::App*, std::pair<Resolver, Command>> table;

    auto* train = app.add_subcommand("train", "Train a model and log validation curves");
    add_common(train, common, ov);
    flag_str(train, ov, "--corpus", "/corpus", "Text corpus");
    flag_num<int>(train, ov, "--steps", "/train/total_steps", "Optimizer steps");
    flag_num<double>(train, ov, "--lr", "/train/learning_rate", "Peak learning rate");
    flag_num<int>(train, ov, "--batch-tokens", "/train/batch_tokens", "Tokens per batch");
    flag_num<int>(train, ov, "--eval-interval", "/train/eval_interval", "Steps between evaluations");
    flag_str(train, ov, "--family", "/model/family", "decoder_any_order or encoder_mdm");
    flag_str(train, ov, "--injection", "/model/injection",
             "add_once, add_per_block_shared, add_per_block_learned or adaln");
    flag_str(train, ov, "--init-checkpoint", "/init_checkpoint", "Start from this checkpoint");
    flag_bool(train, ov, "--deterministic", "/deterministic", "Serial reductions");
    train->add_option_function<std::string>(
        "--policy", [&ov](const std::string& v) { ov.set("/train/order_policy", parse_policy_flag(v)); },
        "Training order policy, e.g. uniform, identity, hybrid:0.1, blockwise:4");
    table[train] = {resolve_train, cmd_train};

    auto* eval = app.add_subcommand("eval", "Perplexity report for a checkpoint");
    add_common(eval, common, ov);
    flag_str(eval, ov, "--checkpoint", "/checkpoint", "Checkpoint file");
    flag_str(eval, ov, "--corpus", "/corpus", "Text corpus (validation split is used)");
    flag_strs(eval, ov, "--modes", "/modes", "Comma list of l2r, any_order, ensemble");
    flag_ints(eval, ov, "--ensemble", "/ensemble_sizes", "Comma list of ensemble sizes M");
    flag_num<int>(eval, ov, "--orders", "/num_orders", "Orders per block");
    flag_num<int>(eval, ov, "--blocks", "/eval_blocks", "Validation blocks");
    flag_num<int>(eval, ov, "--block-len", "/block_len", "Evaluate block prefixes of this length");
    flag_bool(eval, ov, "--deterministic", "/deterministic", "Serial reductions");
    table[eval] = {resolve_eval, cmd_eval};

    auto* sample = app.add_subcommand("sample", "Generate text with the reverse process");
    add_common(sample, common, ov);
    flag_str(sample, ov, "--checkpoint", "/checkpoint", "Checkpoint file");
    flag_num<int>(sample, ov, "--n", "/generation/seq_len", "Sequence length");
    flag_num<int>(sample, ov, "--steps", "/generation/num_steps", "Reverse-process steps");
    flag_num<double>(sample, ov, "--top-p", "/generation/top_p", "Nucleus mass");
    flag_num<double>(sample, ov, "--temperature", "/generation/temperature", "Softmax temperature");
    flag_str(sample, ov, "--engine", "/generation/engine", "decoder_cached, decoder_full_recompute or encoder_full");
    flag_num<int>(sample, ov, "--num-samples", "/num_samples", "Number of samples");
    flag_bool(sample, ov, "--trace", "/trace", "Write trace.jsonl");
    table[sample] = {resolve_sample, cmd_sample};

    auto* bench = app.add_subcommand("bench", "Generation time versus sequence length");
    add_common(bench, common, ov);
    flag_str(bench, ov, "--checkpoint", "/checkpoint", "Checkpoint file (default: random desk model)");
    flag_ints(bench, ov, "--n-grid", "/n_grid", "Comma list of sequence lengths");
    flag_ints(bench, ov, "--t-grid", "/step_grid", "Comma list of step counts (default T = n)");
    flag_strs(bench, ov, "--engines", "/engines", "Comma list of engines");
    flag_num<int>(bench, ov, "--repeats", "/repeats", "Timed runs per configuration");
    flag_num<int>(bench, ov, "--warmup", "/warmup", "Untimed runs per configuration");
    table[bench] = {resolve_bench, cmd_bench};

    auto* count = app.add_subcommand("count", "Conditional-space counts");
    add_common(count, common, ov);
    flag_num<int>(count, ov, "--n", "/n", "Sequence length");
    count->add_flag_callback("--enumerate", [&ov] { ov.set("/enumerate", true); }, "Brute-force check (n <= 8)");
    table[count] = {resolve_count, cmd_count};

    auto* probe = app.add_subcommand("probe", "Any-order vs masked-diffusion estimator probe");
    add_common(probe, common, ov);
    flag_str(probe, ov, "--checkpoint", "/checkpoint", "Checkpoint file");
    flag_str(probe, ov, "--corpus", "/corpus", "Corpus for probe blocks (default: random tokens)");
    flag_num<int>(probe, ov, "--budget", "/budget", "Samples per estimator");
    flag_num<int>(probe, ov, "--block-len", "/block_len", "Block length n");
    flag_num<int>(probe, ov, "--blocks", "/blocks", "Number of blocks");
    flag_str(probe, ov, "--weighting", "/weighting", "elbo or unweighted");
    table[probe] = {resolve_probe, cmd_probe};

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        const auto [resolve, command] = table.at(sub);
        json resolved;
        try {
            resolved = resolve(load_config(common.config), ov);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("invalid config: ") + e.what());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        Run r(sub->get_name(), common.out, common.run_name, resolved);
        guarded(r, [&] { return command(resolved, r, out); });
        err << "run directory: " << r.dir().string() << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        err << "i/o error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const json::exception& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace aoar::cli
