// loramix: command-line front end for the workbench pipeline.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "loramix/adapters.hpp"
#include "loramix/blob_io.hpp"
#include "loramix/config.hpp"
#include "loramix/errors.hpp"
#include "loramix/pipeline.hpp"
#include "loramix/rng.hpp"
#include "loramix/training.hpp"
#include "loramix/verify.hpp"
#include "loramix/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loramix;

namespace {

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::optional<double> lr;
    std::optional<double> alpha;
    std::optional<double> lambda;
    std::optional<double> beta;
    std::string manifest_path;
};

struct RunManifest {
    std::string command;
    json config;
    json inputs = json::object();
    json outputs = json::object();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    std::string started_at;
    fs::path path;

    void write(int exit_status, const std::string &error = {}) const {
        if (path.empty()) return;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        json j = {{"command", command},
                  {"engine_version", kEngineVersion},
                  {"precision", kPrecision},
                  {"config", config},
                  {"seeds", config.is_object() && config.contains("seed") ? json{{"seed", config["seed"]}} : json::object()},
                  {"inputs", inputs},
                  {"outputs", outputs},
                  {"started_at", started_at},
                  {"wall_clock_seconds", secs},
                  {"exit_status", exit_status}};
        if (config.is_object() && config.contains("phase1")) {
            j["seeds"]["head"] = config["head"]["seed"];
            j["seeds"]["phase1"] = config["phase1"]["seed"];
            j["seeds"]["phase2"] = config["phase2"]["seed"];
        }
        if (!error.empty()) j["error"] = error;
        fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
        write_text_atomic(path, j.dump(2) + "\n");
    }
};

std::string utc_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::ostringstream os;
    os << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

PipelineConfig resolve_config(const Overrides &o, const std::optional<PipelineConfig> &fallback = std::nullopt) {
    PipelineConfig cfg;
    if (!o.config_path.empty()) {
        cfg = load_pipeline_config(o.config_path);
    } else if (fallback) {
        cfg = *fallback;
    }
    if (o.seed) cfg.apply_seed(*o.seed);
    cfg.validate();
    return cfg;
}

void apply_phase_overrides(PhaseConfig &p, const Overrides &o) {
    if (o.steps) p.steps = *o.steps;
    if (o.lr) p.learning_rate = *o.lr;
    if (o.alpha) p.loss_weights.alpha = *o.alpha;
    if (o.lambda) p.loss_weights.lambda = *o.lambda;
    if (o.beta) p.loss_weights.beta = *o.beta;
    p.validate();
}

DatasetSplits load_or_generate(const std::string &data_dir, const PipelineConfig &cfg, RunManifest &m) {
    if (data_dir.empty()) {
        m.inputs["data"] = "generated";
        return make_workbench_data(cfg);
    }
    const fs::path dir(data_dir);
    if (!fs::is_directory(dir)) throw IOError("data directory '" + data_dir + "' does not exist");
    m.inputs["data"] = data_dir;
    DatasetSplits d;
    d.train = read_samples_jsonl(dir / "train.jsonl");
    d.val = read_samples_jsonl(dir / "val.jsonl");
    d.test = read_samples_jsonl(dir / "test.jsonl");
    return d;
}

const std::vector<LabeledSample> &pick_split(const DatasetSplits &d, const std::string &split) {
    if (split == "train") return d.train;
    if (split == "val") return d.val;
    return d.test;
}

std::optional<PipelineConfig> stored_config(const json &extra) {
    if (!extra.is_object() || !extra.contains("config")) return std::nullopt;
    return extra.at("config").get<PipelineConfig>();
}

std::string stage_of(const json &extra) {
    return extra.is_object() && extra.contains("stage") ? extra.at("stage").get<std::string>() : "";
}

StepLogger jsonl_logger(std::ofstream &out, const std::string &phase) {
    return [&out, phase](const StepRecord &r) {
        json j = r.to_json();
        j["phase"] = phase;
        out << j.dump() << '\n';
    };
}

void print_table(const EvalReport &rep) {
    std::cout << "layer\texpert\tp_bar\tf_bar\tmean_entropy\trouting_variance\n";
    std::cout << std::setprecision(6);
    for (const auto &[name, s] : rep.layer_stats) {
        for (std::size_t e = 0; e < s.experts(); ++e) {
            std::cout << name << '\t' << e << '\t' << s.p_bar[e] << '\t' << s.f_bar[e] << '\t' << s.mean_entropy << '\t'
                      << s.routing_variance << '\n';
        }
    }
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"loramix: LoRA mixture-of-experts workbench"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    Overrides ov;
    auto add_common = [&](CLI::App *c) {
        c->add_option("--config", ov.config_path, "JSON pipeline config")->check(CLI::ExistingFile);
        c->add_option("--seed", ov.seed, "Base seed for every random choice");
        c->add_option("--manifest", ov.manifest_path, "Where to write the run manifest");
    };
    auto add_training = [&](CLI::App *c) {
        c->add_option("--steps", ov.steps, "Optimizer steps")->check(CLI::PositiveNumber);
        c->add_option("--lr", ov.lr, "Learning rate")->check(CLI::PositiveNumber);
        c->add_option("--alpha", ov.alpha, "Balance weight")->check(CLI::NonNegativeNumber);
        c->add_option("--lambda", ov.lambda, "Entropy weight")->check(CLI::NonNegativeNumber);
        c->add_option("--beta", ov.beta, "Preservation weight")->check(CLI::NonNegativeNumber);
    };

    std::string out_dir, data_dir, checkpoint_dir, split = "test", bundle_dir, mode = "topk";
    std::vector<std::string> bundle_dirs;
    std::size_t topk = 3, sample_limit = 0;
    std::optional<std::size_t> n_per_domain;
    std::optional<int> expert;
    int slot = 0;
    bool renormalize = false;
    std::string scratch;

    auto *gen = app.add_subcommand("gen-data", "Generate the four-domain workbench splits");
    add_common(gen);
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--n-per-domain", n_per_domain, "Samples per domain")->check(CLI::PositiveNumber);

    auto *tex = app.add_subcommand("train-experts", "Phase 1: one expert per domain under hard routing");
    add_common(tex);
    add_training(tex);
    tex->add_option("--data", data_dir, "Dataset directory from gen-data (generated when absent)");
    tex->add_option("--out", out_dir, "Output directory")->required();

    auto *trt = app.add_subcommand("train-router", "Phase 2: router training on mixed data");
    add_common(trt);
    add_training(trt);
    trt->add_option("--experts", checkpoint_dir, "Checkpoint directory written by train-experts")->required();
    trt->add_option("--data", data_dir, "Dataset directory (generated when absent)");
    trt->add_option("--sample-limit", sample_limit, "Train on this many drawn samples only (0 = all)");
    trt->add_option("--out", out_dir, "Output directory")->required();

    auto *ev = app.add_subcommand("eval", "Accuracy and routing statistics on a split");
    add_common(ev);
    ev->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
    ev->add_option("--data", data_dir, "Dataset directory (generated when absent)");
    ev->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--topk", topk, "Experts kept per token")->check(CLI::PositiveNumber);
    ev->add_option("--mode", mode, "topk | soft | hard")->check(CLI::IsMember({"topk", "soft", "hard"}));
    ev->add_flag("--renormalize", renormalize, "Renormalize kept top-k weights");
    ev->add_option("--expert", expert, "Route everything to one expert");
    ev->add_option("--out", out_dir, "Also write metrics.json here");

    auto *insp = app.add_subcommand("inspect-load", "Per-layer expert load table");
    add_common(insp);
    insp->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
    insp->add_option("--data", data_dir, "Dataset directory (generated when absent)");
    insp->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
    insp->add_option("--topk", topk, "Experts kept per token")->check(CLI::PositiveNumber);

    auto *ad = app.add_subcommand("adapter", "Adapter bundles");
    ad->require_subcommand(1);
    auto *ad_exp = ad->add_subcommand("export", "Write one expert as a bundle");
    add_common(ad_exp);
    ad_exp->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
    ad_exp->add_option("--expert", expert, "Expert id")->required();
    ad_exp->add_option("--out", out_dir, "Bundle directory")->required();
    auto *ad_imp = ad->add_subcommand("import", "Install a bundle into an expert slot");
    add_common(ad_imp);
    ad_imp->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
    ad_imp->add_option("--bundle", bundle_dir, "Bundle directory")->required();
    ad_imp->add_option("--slot", slot, "Target expert id");
    ad_imp->add_option("--out", out_dir, "Output checkpoint directory")->required();
    auto *ad_cmp = ad->add_subcommand("compose", "Build mixers from bundles with a fresh router");
    add_common(ad_cmp);
    ad_cmp->add_option("--base", checkpoint_dir, "Base checkpoint (calibrated, unwrapped)")->required();
    ad_cmp->add_option("--bundle", bundle_dirs, "Bundle directories, in expert order")->required();
    ad_cmp->add_option("--out", out_dir, "Output checkpoint directory")->required();

    auto *ver = app.add_subcommand("verify", "Gradient, equilibrium, adapter and determinism checks");
    add_common(ver);
    ver->add_option("--scratch", scratch, "Scratch directory for bundle round trips");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        std::cerr << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
        return 2;
    }

    RunManifest manifest;
    manifest.started_at = utc_now();
    std::vector<std::string> names;
    for (auto *c = app.get_subcommands().front(); c;) {
        names.push_back(c->get_name());
        auto subs = c->get_subcommands();
        c = subs.empty() ? nullptr : subs.front();
    }
    for (const auto &n : names) manifest.command += (manifest.command.empty() ? "" : " ") + n;
    if (!ov.manifest_path.empty()) manifest.path = ov.manifest_path;

    try {
        auto *cmd = app.get_subcommands().front();
        if (cmd == ad) cmd = ad->get_subcommands().front();
        if (cmd == gen) {
            PipelineConfig cfg = resolve_config(ov);
            if (n_per_domain) cfg.n_per_domain = *n_per_domain;
            cfg.validate();
            manifest.config = cfg;
            if (manifest.path.empty()) manifest.path = fs::path(out_dir) / "run.json";
            auto data = make_workbench_data(cfg);
            fs::create_directories(out_dir);
            write_samples_jsonl(fs::path(out_dir) / "train.jsonl", data.train);
            write_samples_jsonl(fs::path(out_dir) / "val.jsonl", data.val);
            write_samples_jsonl(fs::path(out_dir) / "test.jsonl", data.test);
            write_text_atomic(fs::path(out_dir) / "domains.json", json(cfg.domain_specs()).dump(2) + "\n");
            manifest.outputs = {{"dir", out_dir}, {"train", data.train.size()}, {"val", data.val.size()},
                                {"test", data.test.size()}};
            std::cout << json{{"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}}.dump()
                      << "\n";
        } else if (cmd == tex) {
            PipelineConfig cfg = resolve_config(ov);
            apply_phase_overrides(cfg.phase1, ov);
            manifest.config = cfg;
            if (manifest.path.empty()) manifest.path = fs::path(out_dir) / "run.json";
            auto data = load_or_generate(data_dir, cfg, manifest);
            ToyModel model = make_base_model(cfg, data);
            fs::create_directories(out_dir);
            const fs::path out(out_dir);
            save_checkpoint(model, out / "base", {{"stage", "base"}, {"config", cfg}});
            wrap_model(model, cfg);
            std::ofstream log(out / "train_log.jsonl");
            auto result = run_expert_phase(model, cfg, data, jsonl_logger(log, "expert_phase"));
            save_checkpoint(model, out / "checkpoint", {{"stage", "experts"}, {"config", cfg}});
            const auto fp = architecture_fingerprint(model);
            json bundles = json::array();
            for (std::size_t e = 0; e < cfg.num_experts; ++e) {
                const auto dir = out / "bundles" / ("expert" + std::to_string(e));
                export_bundle(model.mixers(), static_cast<int>(e), dir, fp);
                bundles.push_back(dir.string());
            }
            EvalOptions hard;
            hard.mode = RoutingMode::hard;
            auto rep = evaluate(model, data.val, hard);
            manifest.outputs = {{"base", (out / "base").string()},
                                {"checkpoint", (out / "checkpoint").string()},
                                {"bundles", bundles},
                                {"log", (out / "train_log.jsonl").string()}};
            json summary = {{"final", result.records.back().to_json()}, {"val_by_domain", rep.to_json()}};
            std::cout << summary.dump() << "\n";
        } else if (cmd == trt) {
            const fs::path ck(checkpoint_dir);
            if (!fs::exists(ck / "manifest.json")) {
                throw AnchorError("no expert checkpoint at '" + checkpoint_dir +
                                  "'; run train-experts first to fix the preservation anchor");
            }
            json extra;
            ToyModel model = load_checkpoint(ck, &extra);
            if (stage_of(extra) != "experts" && stage_of(extra) != "router" && stage_of(extra) != "composed") {
                throw AnchorError("checkpoint '" + checkpoint_dir + "' holds no trained experts to anchor");
            }
            PipelineConfig cfg = resolve_config(ov, stored_config(extra));
            apply_phase_overrides(cfg.phase2, ov);
            manifest.config = cfg;
            manifest.inputs["experts"] = checkpoint_dir;
            if (manifest.path.empty()) manifest.path = fs::path(out_dir) / "run.json";
            auto data = load_or_generate(data_dir, cfg, manifest);
            auto anchor = phase_anchor(model, cfg.phase2);
            const fs::path out(out_dir);
            fs::create_directories(out);
            std::ofstream log(out / "train_log.jsonl");
            auto result = run_router_phase(model, cfg, data, anchor, sample_limit, jsonl_logger(log, "router_phase"));
            save_checkpoint(model, out / "checkpoint", {{"stage", "router"}, {"config", cfg}});
            manifest.outputs = {{"checkpoint", (out / "checkpoint").string()},
                                {"log", (out / "train_log.jsonl").string()}};
            std::cout << json{{"final", result.records.back().to_json()}}.dump() << "\n";
        } else if (cmd == ev || cmd == insp) {
            json extra;
            ToyModel model = load_checkpoint(checkpoint_dir, &extra);
            PipelineConfig cfg = resolve_config(ov, stored_config(extra));
            manifest.config = cfg;
            manifest.inputs["checkpoint"] = checkpoint_dir;
            auto data = load_or_generate(data_dir, cfg, manifest);
            EvalOptions o;
            o.top_k = topk;
            o.renormalize = renormalize;
            o.mode = cmd == ev ? parse_routing_mode(mode) : RoutingMode::topk;
            if (cmd == ev) o.forced_expert = expert;
            auto rep = evaluate(model, pick_split(data, split), o);
            if (cmd == ev) {
                json j = rep.to_json();
                j["split"] = split;
                std::cout << j.dump() << "\n";
                if (!out_dir.empty()) {
                    fs::create_directories(out_dir);
                    write_text_atomic(fs::path(out_dir) / "metrics.json", j.dump() + "\n");
                    manifest.outputs["metrics"] = (fs::path(out_dir) / "metrics.json").string();
                    if (manifest.path.empty()) manifest.path = fs::path(out_dir) / "run.json";
                }
            } else {
                print_table(rep);
            }
        } else if (cmd == ad_exp) {
            json extra;
            ToyModel model = load_checkpoint(checkpoint_dir, &extra);
            manifest.config = json::object();
            manifest.inputs["checkpoint"] = checkpoint_dir;
            if (fs::exists(out_dir)) throw ExportError("bundle directory '" + out_dir + "' already exists");
            auto b = export_bundle(model.mixers(), *expert, out_dir, architecture_fingerprint(model));
            manifest.outputs["bundle"] = out_dir;
            std::cout << json{{"bundle", out_dir}, {"expert_id", b.expert_id}, {"layers", b.layers()}}.dump() << "\n";
        } else if (cmd == ad_imp) {
            json extra;
            ToyModel model = load_checkpoint(checkpoint_dir, &extra);
            manifest.config = json::object();
            manifest.inputs = {{"checkpoint", checkpoint_dir}, {"bundle", bundle_dir}};
            auto report = import_bundle(bundle_dir, model, slot);
            std::cout << report.to_json().dump() << "\n";
            if (report.overall != CompatOverall::incompatible) {
                extra["stage"] = stage_of(extra).empty() ? "composed" : stage_of(extra);
                save_checkpoint(model, out_dir, extra);
                manifest.outputs["checkpoint"] = out_dir;
            }
        } else if (cmd == ad_cmp) {
            json extra;
            ToyModel model = load_checkpoint(checkpoint_dir, &extra);
            PipelineConfig cfg = resolve_config(ov, stored_config(extra));
            manifest.config = cfg;
            manifest.inputs = {{"base", checkpoint_dir}, {"bundles", bundle_dirs}};
            std::vector<fs::path> paths(bundle_dirs.begin(), bundle_dirs.end());
            auto mixers = compose(paths, model, cfg.router, derive_seed(cfg.seed, {21}));
            cfg.num_experts = paths.size();
            save_checkpoint(model, out_dir, {{"stage", "composed"}, {"config", cfg}});
            manifest.outputs["checkpoint"] = out_dir;
            std::cout << json{{"checkpoint", out_dir}, {"experts", paths.size()}, {"layers", mixers.size()}}.dump()
                      << "\n";
        } else if (cmd == ver) {
            const fs::path dir = scratch.empty() ? fs::temp_directory_path() / ("loramix-verify-" + std::to_string(::getpid()))
                                                 : fs::path(scratch);
            bool ok = true;
            for (const auto &r : quick_suite(dir)) {
                std::cout << r.line() << std::endl;
                ok = ok && (r.passed || r.informational);
            }
            manifest.outputs["passed"] = ok;
            manifest.write(ok ? 0 : 1);
            return ok ? 0 : 1;
        }
        manifest.write(0);
        return 0;
    } catch (const Error &e) {
        std::cerr << "loramix: " << e.kind() << ": " << e.what() << "\n";
        try {
            manifest.write(1, std::string(e.kind()) + ": " + e.what());
        } catch (...) {
        }
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "loramix: internal error: " << e.what() << "\n";
        return 1;
    }
}
