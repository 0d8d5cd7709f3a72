#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capmod/checkpoint.hpp"
#include "capmod/config.hpp"
#include "capmod/dataset.hpp"
#include "capmod/gradcheck.hpp"
#include "capmod/inference.hpp"
#include "capmod/metrics.hpp"
#include "capmod/synthetic.hpp"
#include "capmod/trainer.hpp"

namespace {

using Real = double;
namespace fs = std::filesystem;

std::string data_dir_default() {
    const char* env = std::getenv("CAPMOD_DATA_DIR");
    return env && *env ? std::string(env) : std::string("data");
}

std::string parent_dir(const std::string& path) {
    auto p = fs::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw capmod::IoError("cannot open " + path + " for writing");
    return f;
}

void write_json_file(const std::string& path, const nlohmann::ordered_json& j) {
    auto f = open_out(path);
    f << j.dump(2) << "\n";
    if (!f) throw capmod::IoError("short write to " + path);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw capmod::IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw capmod::ConfigError(path + ": " + ex.what());
    }
    return j;
}

// Command-line overrides for RunConfig fields. The values land in `staged`
// during parsing; apply_to() copies across only the flags actually given,
// so the base config (defaults, or a checkpoint's stored config) survives
// untouched elsewhere. The config file is applied after this, and wins.
struct ConfigFlags {
    capmod::RunConfig staged;
    std::vector<std::pair<CLI::Option*, std::function<void(capmod::RunConfig&)>>> appliers;

    template <typename T>
    void bind(CLI::App* cmd, const std::string& flag, T capmod::RunConfig::*mem,
              const std::string& desc) {
        auto* o = cmd->add_option(flag, staged.*mem, desc);
        appliers.emplace_back(o, [this, mem](capmod::RunConfig& c) { c.*mem = staged.*mem; });
    }

    void bind_flag(CLI::App* cmd, const std::string& flag, bool capmod::RunConfig::*mem,
                   const std::string& desc) {
        auto* o = cmd->add_flag(flag, staged.*mem, desc);
        appliers.emplace_back(o, [this, mem](capmod::RunConfig& c) { c.*mem = staged.*mem; });
    }

    void bind_all(CLI::App* cmd) {
        using RC = capmod::RunConfig;
        // long-form help only: the -h shorthand would collide with --h below
        cmd->set_help_flag("--help", "print this help message and exit");
        bind(cmd, "--d", &RC::d, "sentence-embedding / gate / output width");
        bind(cmd, "--h", &RC::h, "LSTM hidden size");
        bind(cmd, "--emb", &RC::emb, "word-embedding size");
        bind(cmd, "--attn", &RC::attn, "attention size");
        bind(cmd, "--max-len", &RC::max_len, "caption length cap");
        bind(cmd, "--min-count", &RC::min_count, "vocabulary frequency threshold");
        bind(cmd, "--attention", &RC::attention, "attention branch: spatial or region");
        bind(cmd, "--beta", &RC::beta, "attribute-term scale");
        bind(cmd, "--occurrence-threshold", &RC::occurrence_threshold,
             "attribute-term cutoff on f/N");
        bind_flag(cmd, "--attr-term,!--no-attr-term", &RC::attr_term_enabled,
                  "monitor the attribute term");
        bind(cmd, "--lr", &RC::lr, "Adam learning rate");
        bind(cmd, "--lr-decay", &RC::lr_decay, "learning-rate decay factor");
        bind(cmd, "--lr-decay-every", &RC::lr_decay_every, "epochs between decays");
        bind(cmd, "--batch-size", &RC::batch_size, "examples per optimizer step");
        bind(cmd, "--max-epochs", &RC::max_epochs, "epoch cap");
        bind(cmd, "--patience", &RC::patience,
             "epochs without validation improvement before stopping (0 = never)");
        bind(cmd, "--grad-clip", &RC::grad_clip, "global gradient-norm clip");
        bind(cmd, "--dropout", &RC::dropout, "variational dropout rate");
        bind(cmd, "--beam", &RC::beam_size, "beam size");
        bind_flag(cmd, "--length-normalize,!--no-length-normalize", &RC::length_normalize,
                  "divide beam scores by length at the final pick");
        bind(cmd, "--seed", &RC::seed, "run seed");
        bind_flag(cmd, "--measure-time,!--no-measure-time", &RC::measure_time,
                  "record wall-clock epoch times in the log (breaks byte-identical logs)");
    }

    // Decode-time knobs only, for commands that run a trained checkpoint.
    void bind_decode(CLI::App* cmd) {
        using RC = capmod::RunConfig;
        bind(cmd, "--beam", &RC::beam_size, "beam size");
        bind(cmd, "--max-len", &RC::max_len, "caption length cap");
        bind_flag(cmd, "--length-normalize,!--no-length-normalize", &RC::length_normalize,
                  "divide beam scores by length at the final pick");
    }

    void apply_to(capmod::RunConfig& cfg) const {
        for (const auto& [opt, apply] : appliers)
            if (opt->count() > 0) apply(cfg);
    }
};

// ---------------------------------------------------------------- gen-data

struct GenArgs {
    std::string spec_path;
    std::size_t n = 0;
    std::uint64_t seed = 42;
    std::string out = data_dir_default();
    std::string name = "train";
};

int run_gen_data(const GenArgs& a) {
    capmod::SyntheticSpec spec =
        a.spec_path.empty() ? capmod::SyntheticSpec{} : capmod::SyntheticSpec::load(a.spec_path);
    auto exs = capmod::generate_synthetic(spec, a.n, a.seed);
    auto raws = capmod::write_synthetic_dataset(exs, a.out, a.name);

    nlohmann::ordered_json resolved;
    resolved["spec"] = spec.to_json();
    resolved["n"] = a.n;
    resolved["seed"] = a.seed;
    resolved["name"] = a.name;
    write_json_file((fs::path(a.out) / (a.name + ".genspec.json")).string(), resolved);

    std::map<std::string, std::size_t> policies;
    std::size_t attr_min = raws[0].attributes.size(), attr_max = attr_min;
    for (const auto& r : raws) {
        ++policies[r.policy];
        attr_min = std::min(attr_min, r.attributes.size());
        attr_max = std::max(attr_max, r.attributes.size());
    }
    auto vocab = capmod::build_vocab_from_dataset(raws, 1);

    std::printf("wrote %zu examples to %s\n", raws.size(),
                (fs::path(a.out) / (a.name + ".jsonl")).string().c_str());
    std::printf("features: image %zu x %zu, region %zu x %zu (f32)\n", exs[0].image_shape[0],
                exs[0].image_shape[1], exs[0].region_shape[0], exs[0].region_shape[1]);
    std::string pol;
    for (const auto& [k, v] : policies) pol += " " + k + "=" + std::to_string(v);
    std::printf("policies:%s\n", pol.c_str());
    if (attr_min == attr_max)
        std::printf("attributes per example: %zu\n", attr_min);
    else
        std::printf("attributes per example: %zu..%zu\n", attr_min, attr_max);
    std::printf("vocabulary (min_count 1): %zu tokens\n", vocab.size());
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    std::string data = (fs::path(data_dir_default()) / "train.jsonl").string();
    std::string val = (fs::path(data_dir_default()) / "val.jsonl").string();
    std::string config_path;
    std::string out = "run";
    std::string resume;
};

capmod::Vocabulary load_vocab_beside(const std::string& ckpt_path) {
    std::string path = (fs::path(ckpt_path).parent_path() / "vocab.json").string();
    return capmod::Vocabulary::from_json(read_json_file(path));
}

int run_train(const TrainArgs& a, const ConfigFlags& flags) {
    capmod::RunConfig cfg;
    std::optional<capmod::Checkpoint<Real>> ck;
    std::size_t start_epoch = 0;
    if (!a.resume.empty()) {
        ck = capmod::load_checkpoint<Real>(a.resume);
        cfg = ck->config;  // the stored config becomes the default set
        start_epoch = ck->epochs_trained;
    }
    flags.apply_to(cfg);
    if (!a.config_path.empty()) cfg.apply_json(read_json_file(a.config_path));
    cfg.validate();

    auto train_raws = capmod::load_dataset(a.data);
    auto val_raws = capmod::load_dataset(a.val);

    capmod::Vocabulary vocab = ck ? load_vocab_beside(a.resume)
                                  : capmod::build_vocab_from_dataset(train_raws, cfg.min_count);
    if (ck) capmod::require_vocab_hash(*ck, vocab.content_hash());

    auto train_set = capmod::encode_dataset<Real>(train_raws, vocab, parent_dir(a.data), cfg.max_len);
    auto val_set = capmod::encode_dataset<Real>(val_raws, vocab, parent_dir(a.val), cfg.max_len);
    if (train_set.empty()) throw capmod::ConfigError(a.data + ": empty training set");
    if (val_set.empty()) throw capmod::ConfigError(a.val + ": empty validation set");

    std::size_t dv = train_set[0].image_features.dim(1);
    std::size_t db = train_set[0].region_features ? train_set[0].region_features->dim(1) : 0;
    auto dims = capmod::ModelDims::from_config(cfg, vocab.size(), dv, db);

    capmod::ModelParams<Real> params;
    if (ck) {
        if (!(dims == ck->params.dims))
            throw capmod::ConfigError(
                "resume: resolved model dimensions differ from the checkpoint");
        params = std::move(ck->params);
    } else {
        params = capmod::init_model<Real>(dims, cfg.seed);
    }

    fs::create_directories(a.out);
    cfg.save((fs::path(a.out) / "config.json").string());
    write_json_file((fs::path(a.out) / "vocab.json").string(), vocab.to_json());
    auto log_path = (fs::path(a.out) / "train_log.jsonl").string();
    auto logf = open_out(log_path);

    auto res = capmod::train_model(params, train_set, val_set, vocab, cfg, start_epoch,
                                   [&](const capmod::EpochStats& s) {
                                       logf << capmod::epoch_stats_to_json(s).dump() << "\n";
                                       logf.flush();
                                   });

    std::size_t total_epochs = res.log.empty() ? start_epoch : res.log.back().epoch;
    auto ckpt_path = (fs::path(a.out) / "model.lamp").string();
    capmod::save_checkpoint(res.best_params, cfg, vocab.content_hash(), total_epochs, ckpt_path);

    std::printf("best epoch %zu  val CIDEr %.6f%s\n", res.best_epoch, res.best_val_cider,
                res.stopped_early ? "  (stopped early)" : "");
    std::printf("wrote %s (+ sidecar, vocab.json, config.json, train_log.jsonl)\n",
                ckpt_path.c_str());
    return 0;
}

// ------------------------------------------------------------------ modify

struct DecodeArgs {
    std::string ckpt;
    std::string input = (fs::path(data_dir_default()) / "val.jsonl").string();
    std::string out;
    std::string trace;
    std::string vocab_path;
};

struct LoadedModel {
    capmod::Checkpoint<Real> ck;
    capmod::Vocabulary vocab;
    std::vector<capmod::RawExample> raws;
    std::vector<capmod::Example<Real>> examples;
};

LoadedModel load_for_decode(const std::string& ckpt_path, const std::string& vocab_path,
                            const std::string& data_path, const ConfigFlags& flags) {
    LoadedModel m{capmod::load_checkpoint<Real>(ckpt_path), {}, {}, {}};
    flags.apply_to(m.ck.config);  // decode-time overrides (--beam etc.)
    m.ck.config.validate();
    m.vocab = vocab_path.empty() ? load_vocab_beside(ckpt_path)
                                 : capmod::Vocabulary::from_json(read_json_file(vocab_path));
    capmod::require_vocab_hash(m.ck, m.vocab.content_hash());
    m.raws = capmod::load_dataset(data_path);
    m.examples = capmod::encode_dataset<Real>(m.raws, m.vocab, parent_dir(data_path),
                                              m.ck.config.max_len);
    if (m.examples.empty()) throw capmod::ConfigError(data_path + ": empty dataset");
    std::size_t dv = m.examples[0].image_features.dim(1);
    std::size_t db = m.examples[0].region_features ? m.examples[0].region_features->dim(1) : 0;
    capmod::require_feature_widths(m.ck, dv, db);
    return m;
}

std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

int run_modify(const DecodeArgs& a, const ConfigFlags& flags) {
    auto m = load_for_decode(a.ckpt, a.vocab_path, a.input, flags);
    const auto& cfg = m.ck.config;

    auto outf = open_out(a.out);
    std::optional<std::ofstream> tracef;
    if (!a.trace.empty()) {
        tracef = open_out(a.trace);
        *tracef << "example_id,t,token,mean_gr,mean_gs,alpha\n";
    }

    for (std::size_t i = 0; i < m.examples.size(); ++i) {
        const auto& ex = m.examples[i];
        auto res = capmod::modify(m.ck.params, ex, cfg.beam_size, cfg.max_len,
                                  cfg.length_normalize);
        auto words = capmod::ids_to_caption(res.tokens, m.vocab);

        nlohmann::ordered_json line;
        line["example_id"] = ex.id;
        line["existing"] = m.raws[i].existing;
        line["modified"] = capmod::join_ws(words);
        line["logprob"] = res.logprob;
        std::vector<double> gates;
        for (const auto& st : res.trace) gates.push_back(st.gr_mean);
        line["gates"] = gates;
        outf << line.dump() << "\n";

        if (tracef) {
            for (std::size_t t = 0; t < res.trace.size(); ++t) {
                const auto& st = res.trace[t];
                std::string alpha;
                for (std::size_t j = 0; j < st.alpha.size(); ++j)
                    alpha += (j ? ";" : "") + fmt_g(st.alpha[j]);
                *tracef << ex.id << "," << t << "," << m.vocab.decode(st.token) << ","
                        << fmt_g(st.gr_mean) << "," << fmt_g(st.gs_mean) << "," << alpha << "\n";
            }
        }
    }
    cfg.save(a.out + ".config.json");
    std::printf("modified %zu captions -> %s\n", m.examples.size(), a.out.c_str());
    if (!a.trace.empty()) std::printf("step diagnostics -> %s\n", a.trace.c_str());
    return 0;
}

// -------------------------------------------------------------------- eval

nlohmann::ordered_json scores_to_json(const capmod::EvalScores& s) {
    nlohmann::ordered_json j;
    j["bleu1"] = s.bleu[0];
    j["bleu2"] = s.bleu[1];
    j["bleu3"] = s.bleu[2];
    j["bleu4"] = s.bleu[3];
    j["rougeL"] = s.rouge_l;
    j["cider"] = s.cider;
    return j;
}

int run_eval(const DecodeArgs& a, const ConfigFlags& flags) {
    auto m = load_for_decode(a.ckpt, a.vocab_path, a.input, flags);
    const auto& cfg = m.ck.config;

    std::vector<capmod::Caption> modified, existing;
    std::vector<std::vector<capmod::Caption>> refs;
    for (std::size_t i = 0; i < m.examples.size(); ++i) {
        auto res = capmod::modify(m.ck.params, m.examples[i], cfg.beam_size, cfg.max_len,
                                  cfg.length_normalize);
        modified.push_back(capmod::ids_to_caption(res.tokens, m.vocab));
        existing.push_back(capmod::tokenize_caption(m.raws[i].existing));
        std::vector<capmod::Caption> r;
        for (const auto& g : m.raws[i].gold) r.push_back(capmod::tokenize_caption(g));
        refs.push_back(std::move(r));
    }

    auto ms = capmod::score_corpus(modified, refs);
    auto es = capmod::score_corpus(existing, refs);

    nlohmann::ordered_json out;
    out["n_images"] = ms.n_images;
    out["modified"] = scores_to_json(ms);
    out["existing"] = scores_to_json(es);
    std::vector<std::string> warnings = ms.warnings;
    warnings.insert(warnings.end(), es.warnings.begin(), es.warnings.end());
    out["warnings"] = warnings;

    std::cout << out.dump(2) << "\n";
    write_json_file(a.out, out);
    cfg.save(a.out + ".config.json");
    return 0;
}

// -------------------------------------------------------------- grad-check

struct GradCheckArgs {
    std::string dims = "d=8,h=12,emb=8,attn=8,vocab=20,dv=10,db=9,p=4,k=3,attention=spatial";
    std::uint64_t seed = 1;
    std::size_t samples = 0;
    double step = 1e-4;
    double tol = 1e-4;
    std::size_t n_examples = 3;
    std::string corrupt;
};

struct ParsedDims {
    capmod::ModelDims dims;
    std::size_t p = 4;  // spatial grid positions (rows minus the global one)
    std::size_t k = 3;  // region rows
};

ParsedDims parse_dims(const std::string& s) {
    ParsedDims out;
    out.dims.vocab = 20;
    out.dims.emb = 8;
    out.dims.d = 8;
    out.dims.h = 12;
    out.dims.a = 8;
    out.dims.d_v = 10;
    out.dims.d_b = 9;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        std::string item = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
        pos = comma == std::string::npos ? s.size() : comma + 1;
        if (item.empty()) continue;
        std::size_t eq = item.find('=');
        if (eq == std::string::npos)
            throw capmod::ConfigError("--dims: expected key=value, got '" + item + "'");
        std::string key = item.substr(0, eq), val = item.substr(eq + 1);
        if (key == "attention") {
            out.dims.attention = capmod::attention_kind_from(val);
            continue;
        }
        std::size_t n = 0;
        try {
            n = static_cast<std::size_t>(std::stoull(val));
        } catch (const std::exception&) {
            throw capmod::ConfigError("--dims: bad value for " + key + ": '" + val + "'");
        }
        if (key == "d") out.dims.d = n;
        else if (key == "h") out.dims.h = n;
        else if (key == "emb") out.dims.emb = n;
        else if (key == "attn") out.dims.a = n;
        else if (key == "vocab") out.dims.vocab = n;
        else if (key == "dv") out.dims.d_v = n;
        else if (key == "db") out.dims.d_b = n;
        else if (key == "p") out.p = n;
        else if (key == "k") out.k = n;
        else throw capmod::ConfigError("--dims: unknown key '" + key + "'");
    }
    return out;
}

int run_grad_check(const GradCheckArgs& a) {
    auto pd = parse_dims(a.dims);
    auto P = capmod::init_model<Real>(pd.dims, a.seed);
    auto examples = capmod::gradcheck_examples<Real>(pd.dims, a.seed, a.n_examples, pd.p, pd.k);

    capmod::GradCheckOptions opt;
    opt.fd_step = a.step;
    opt.tolerance = a.tol;
    opt.samples_per_group = a.samples;
    opt.seed = a.seed;

    std::printf("model: d=%zu h=%zu emb=%zu attn=%zu vocab=%zu dv=%zu db=%zu attention=%s\n",
                pd.dims.d, pd.dims.h, pd.dims.emb, pd.dims.a, pd.dims.vocab, pd.dims.d_v,
                pd.dims.d_b, capmod::attention_kind_name(pd.dims.attention).c_str());
    std::string samples = a.samples == 0 ? std::string("all") : std::to_string(a.samples);
    std::printf("batch: %zu examples (p=%zu, k=%zu)  seed %llu  fd step %g  samples %s\n",
                a.n_examples, pd.p, pd.k, static_cast<unsigned long long>(a.seed), a.step,
                samples.c_str());
    if (!a.corrupt.empty())
        std::printf("corrupting stored gradients of group %s\n", a.corrupt.c_str());

    auto rep = capmod::grad_check(P, examples, opt, a.corrupt);
    std::fputs(capmod::format_gradcheck_report(rep, opt.tolerance).c_str(), stdout);
    return rep.passed(opt.tolerance) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "caption modification pipeline: synthesize data, train the modification "
        "network, rewrite captions, score them, and verify gradients"};
    app.require_subcommand(1);

    GenArgs ga;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic caption-correction dataset");
    gen->add_option("--spec", ga.spec_path, "generator spec JSON (defaults are built in)");
    gen->add_option("--n", ga.n, "number of examples")
        ->required()
        ->check(CLI::Validator(
            [](const std::string& v) {
                return v.find_first_not_of("0") == std::string::npos
                           ? std::string("must be at least 1")
                           : std::string();
            },
            "UINT>=1"));
    gen->add_option("--seed", ga.seed, "generation seed");
    gen->add_option("--out", ga.out, "output directory (default: $CAPMOD_DATA_DIR or ./data)");
    gen->add_option("--name", ga.name, "dataset name (writes <name>.jsonl)");

    TrainArgs ta;
    ConfigFlags train_flags;
    auto* tr = app.add_subcommand("train", "train the modification network");
    tr->add_option("--data", ta.data, "training JSONL");
    tr->add_option("--val", ta.val, "validation JSONL");
    tr->add_option("--config", ta.config_path,
                   "config JSON; its values override command-line flags");
    tr->add_option("--out", ta.out, "output directory");
    tr->add_option("--resume", ta.resume, "checkpoint to continue from");
    train_flags.bind_all(tr);

    DecodeArgs ma;
    ma.out = "modified.jsonl";
    ConfigFlags modify_flags;
    auto* mo = app.add_subcommand("modify", "rewrite existing captions with a trained model");
    mo->add_option("--ckpt", ma.ckpt, "checkpoint path")->required();
    mo->add_option("--input", ma.input, "input JSONL");
    mo->add_option("--out", ma.out, "output JSONL");
    mo->add_option("--trace", ma.trace, "per-step diagnostics CSV");
    mo->add_option("--vocab", ma.vocab_path, "vocabulary JSON (default: beside the checkpoint)");
    modify_flags.bind_decode(mo);

    DecodeArgs ea;
    ea.out = "metrics.json";
    ConfigFlags eval_flags;
    auto* ev = app.add_subcommand("eval", "score modified captions against gold references");
    ev->add_option("--ckpt", ea.ckpt, "checkpoint path")->required();
    ev->add_option("--data", ea.input, "evaluation JSONL");
    ev->add_option("--out", ea.out, "metrics JSON output path");
    ev->add_option("--vocab", ea.vocab_path, "vocabulary JSON (default: beside the checkpoint)");
    eval_flags.bind_decode(ev);

    GradCheckArgs ca;
    auto* gc = app.add_subcommand("grad-check",
                                  "compare tape gradients against finite differences");
    gc->add_option("--dims", ca.dims,
                   "model dims as key=value pairs: d,h,emb,attn,vocab,dv,db,p,k,attention");
    gc->add_option("--seed", ca.seed, "init and sampling seed");
    gc->add_option("--samples", ca.samples, "entries checked per group (0 = all)");
    gc->add_option("--step", ca.step, "finite-difference step");
    gc->add_option("--tol", ca.tol, "max relative error allowed");
    gc->add_option("--examples", ca.n_examples, "batch size for the check");
    gc->add_option("--corrupt", ca.corrupt,
                   "perturb this group's gradients after backward (negative-control hook)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(ga);
        if (tr->parsed()) return run_train(ta, train_flags);
        if (mo->parsed()) return run_modify(ma, modify_flags);
        if (ev->parsed()) return run_eval(ea, eval_flags);
        if (gc->parsed()) return run_grad_check(ca);
    } catch (const capmod::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const capmod::DomainError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const capmod::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
