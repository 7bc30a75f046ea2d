#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sarl/evaluate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "sarl 0.1.0";

// Machine-parseable error classes, one distinct exit code each.
enum ExitCode {
    kOk = 0,
    kCheckFailed = 1,
    kUsage = 2,
    kConfigUnreadable = 3,
    kSchemaMismatch = 4,
    kConfigInvalid = 5,
    kCkptNotFound = 6,
    kDataError = 7,
    kRuntimeError = 8,
};

int fail(ExitCode code, const std::string& cls, const std::string& msg) {
    std::cerr << cls << ": " << msg << "\n";
    return code;
}

std::string iso_now() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_manifest(const std::string& run_dir, const std::string& command, const json& config,
                    uint64_t seed, const std::string& started,
                    const std::vector<std::string>& artifacts, int exit_status) {
    fs::create_directories(run_dir);
    json j{{"command", command},     {"config", config},
           {"code_version", kVersion}, {"seed", seed},
           {"started", started},     {"finished", iso_now()},
           {"artifacts", artifacts}, {"exit_status", exit_status}};
    std::string tmp = run_dir + "/manifest.json.tmp";
    std::ofstream(tmp) << j.dump(2) << "\n";
    fs::rename(tmp, run_dir + "/manifest.json");
}

sarl::TrainConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::ios_base::failure("cannot read config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw std::ios_base::failure(std::string("config parse error: ") + e.what());
    }
    return sarl::train_config_from_json(j);
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
    return out;
}

sarl::Modality parse_modality(const std::string& s) {
    if (s == "visual") return sarl::Modality::kVisualOnly;
    if (s == "marker") return sarl::Modality::kMarkerOnly;
    return sarl::modality_from_string(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SARL pretraining and evaluation toolkit"};
    app.require_subcommand(1);

    // --- gen-data ---
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    std::string gd_task = "shape", gd_out, gd_modality = "fused";
    int gd_n = 100;
    uint64_t gd_seed = 1;
    gen->add_option("--task", gd_task, "shape|texture|edge_pose|contact_point|force");
    gen->add_option("--n", gd_n, "number of samples")->required();
    gen->add_option("--seed", gd_seed, "rng seed");
    gen->add_option("--out", gd_out, "output directory")->required();
    gen->add_option("--modality", gd_modality, "fused|visual|marker");

    // --- pretrain ---
    auto* pre = app.add_subcommand("pretrain", "SARL self-supervised pretraining");
    std::string pt_config, pt_run, pt_data, pt_losses, pt_modality, pt_resume;
    int pt_epochs = -1, pt_batch = -1;
    int64_t pt_seed = -1;
    pre->add_option("--config", pt_config, "config file (json)");
    pre->add_option("--run-dir", pt_run, "run directory")->required();
    pre->add_option("--data", pt_data, "dataset directory")->required();
    pre->add_option("--losses", pt_losses, "comma list from sal,ppda,ram (empty = none)");
    pre->add_option("--modality", pt_modality, "fused|visual|marker");
    pre->add_option("--epochs", pt_epochs, "override epochs");
    pre->add_option("--batch-size", pt_batch, "override batch size");
    pre->add_option("--seed", pt_seed, "override seed");
    pre->add_option("--resume", pt_resume, "checkpoint to resume from");

    // --- probe ---
    auto* prb = app.add_subcommand("probe", "Frozen-encoder linear probe");
    std::string pb_ckpt, pb_task = "shape", pb_run, pb_data;
    uint64_t pb_seed = 0;
    prb->add_option("--ckpt", pb_ckpt, "pretraining checkpoint")->required();
    prb->add_option("--task", pb_task, "probe task");
    prb->add_option("--run-dir", pb_run, "run directory")->required();
    prb->add_option("--data", pb_data, "dataset directory")->required();
    prb->add_option("--seed", pb_seed, "probe seed");

    // --- ablate ---
    auto* abl = app.add_subcommand("ablate", "Loss-subset / modality ablation matrix");
    std::string ab_config, ab_run, ab_data, ab_seeds = "1,2,3", ab_modalities = "fused";
    int ab_jobs = 1;
    abl->add_option("--config", ab_config, "base config file (json)");
    abl->add_option("--run-dir", ab_run, "run directory")->required();
    abl->add_option("--data", ab_data, "dataset directory")->required();
    abl->add_option("--seeds", ab_seeds, "comma-separated seed list");
    abl->add_option("--modalities", ab_modalities, "comma list from fused,visual,marker");
    abl->add_option("--jobs", ab_jobs, "cell-level parallelism (currently sequential)");

    // --- gradcheck ---
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
    double gc_tol = 1e-4, gc_h = 1e-5;
    std::string gc_run = ".";
    gc->set_help_flag("--help", "print help");  // frees the short -h for the fd step
    gc->add_option("--tolerance", gc_tol, "max relative error allowed");
    gc->add_option("--h", gc_h, "finite-difference step");
    gc->add_option("--run-dir", gc_run, "where gradcheck.json is written");

    // --- report ---
    auto* rep = app.add_subcommand("report", "Render tables from results.csv");
    std::string rp_in, rp_format = "table";
    rep->add_option("--in", rp_in, "results.csv path")->required();
    rep->add_option("--format", rp_format, "csv|table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "USAGE_ERROR: " << e.what() << "\n";
        return kUsage;
    }

    std::string started = iso_now();
    try {
        if (*gen) {
            sarl::Dataset ds = sarl::make_dataset(sarl::task_from_string(gd_task), gd_n, gd_seed,
                                                  parse_modality(gd_modality));
            sarl::save_dataset(ds, gd_out);
            write_manifest(gd_out, "gen-data",
                           json{{"task", gd_task},
                                {"n", gd_n},
                                {"seed", gd_seed},
                                {"modality", gd_modality}},
                           gd_seed, started, {"manifest.jsonl", "images/"}, 0);
            std::cout << "wrote " << ds.samples.size() << " samples to " << gd_out << "\n";
            return kOk;
        }

        if (*pre) {
            sarl::TrainConfig cfg =
                pt_config.empty() ? sarl::TrainConfig{} : load_config_file(pt_config);
            if (pt_epochs >= 0) cfg.epochs = pt_epochs;
            if (pt_batch > 0) cfg.batch_size = pt_batch;
            if (pt_seed >= 0) cfg.seed = static_cast<uint64_t>(pt_seed);
            if (!pt_modality.empty()) cfg.modality = parse_modality(pt_modality);
            if (pre->count("--losses")) {
                cfg.loss.use_sal = pt_losses.find("sal") != std::string::npos;
                cfg.loss.use_ppda = pt_losses.find("ppda") != std::string::npos;
                cfg.loss.use_ram = pt_losses.find("ram") != std::string::npos;
            }
            sarl::Dataset ds = sarl::load_dataset(pt_data);
            sarl::TrainState<float> st =
                pt_resume.empty() ? sarl::init_train_state<float>(cfg)
                                  : sarl::load_checkpoint<float>(pt_resume);
            sarl::pretrain(st, ds, pt_run);
            write_manifest(pt_run, "pretrain", sarl::train_config_to_json(st.config), cfg.seed,
                           started, {"config.snapshot", "metrics.log", "ckpt/"}, 0);
            std::cout << "pretraining done: " << st.step << " steps, " << st.epoch
                      << " epochs\n";
            return kOk;
        }

        if (*prb) {
            if (!fs::exists(pb_ckpt)) return fail(kCkptNotFound, "CKPT_NOT_FOUND", pb_ckpt);
            sarl::TrainState<float> st = sarl::load_checkpoint<float>(pb_ckpt);
            sarl::Dataset ds = sarl::load_dataset(pb_data);
            sarl::ProbeConfig pc;
            pc.task = sarl::task_from_string(pb_task);
            pc.seed = pb_seed;
            sarl::MetricsReport mr = sarl::linear_probe(st, pc, ds);
            fs::create_directories(pb_run);
            json out{{"task", pb_task},
                     {"checkpoint", pb_ckpt},
                     {"seed", pb_seed},
                     {"top1", mr.top1},
                     {"top5", mr.top5},
                     {"per_axis_mae", mr.per_axis_mae},
                     {"avg_mae", mr.avg_mae}};
            std::ofstream(pb_run + "/probe_metrics.json") << out.dump(2) << "\n";
            write_manifest(pb_run, "probe", out, pb_seed, started, {"probe_metrics.json"}, 0);
            std::cout << out.dump() << "\n";
            return kOk;
        }

        if (*abl) {
            sarl::TrainConfig base =
                ab_config.empty() ? sarl::TrainConfig{} : load_config_file(ab_config);
            sarl::Dataset ds = sarl::load_dataset(ab_data);
            std::vector<sarl::Modality> modes;
            std::stringstream ss(ab_modalities);
            std::string tok;
            while (std::getline(ss, tok, ',')) modes.push_back(parse_modality(tok));
            auto rows = sarl::ablation_matrix(base, sarl::default_loss_subsets(), modes,
                                              parse_seed_list(ab_seeds), ds, ab_run);
            std::ofstream(ab_run + "/table.txt") << sarl::render_results_table(rows);
            write_manifest(ab_run, "ablate", sarl::train_config_to_json(base), base.seed,
                           started, {"results.csv", "table.txt", "runs/"}, 0);
            std::cout << sarl::render_results_table(rows);
            return kOk;
        }

        if (*gc) {
            sarl::GradCheckReport r = sarl::gradcheck_suite(gc_h, gc_tol);
            fs::create_directories(gc_run);
            sarl::write_gradcheck_json(r, gc_run + "/gradcheck.json");
            for (const auto& e : r.entries)
                std::cout << e.term << ": max_rel_err=" << e.max_rel_err << " "
                          << (e.pass ? "pass" : "FAIL") << "\n";
            write_manifest(gc_run, "gradcheck", json{{"h", gc_h}, {"tolerance", gc_tol}}, 0,
                           started, {"gradcheck.json"}, r.all_pass ? 0 : 1);
            return r.all_pass ? kOk : kCheckFailed;
        }

        if (*rep) {
            auto rows = sarl::read_results_csv(rp_in);
            if (rp_format == "csv") {
                std::ifstream f(rp_in);
                std::cout << f.rdbuf();
            } else {
                std::cout << sarl::render_results_table(rows);
            }
            return kOk;
        }
    } catch (const std::ios_base::failure& e) {
        return fail(kConfigUnreadable, "CONFIG_UNREADABLE", e.what());
    } catch (const std::invalid_argument& e) {
        return fail(kConfigInvalid, "CONFIG_INVALID", e.what());
    } catch (const std::domain_error& e) {
        return fail(kDataError, "DATA_ERROR", e.what());
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        if (msg.find("schema_version mismatch") != std::string::npos)
            return fail(kSchemaMismatch, "SCHEMA_MISMATCH", msg);
        if (msg.find("checkpoint not found") != std::string::npos)
            return fail(kCkptNotFound, "CKPT_NOT_FOUND", msg);
        return fail(kRuntimeError, "RUNTIME_ERROR", msg);
    }
    return kUsage;
}
