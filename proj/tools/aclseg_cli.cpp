#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aclseg/cli/commands.hpp"
#include "aclseg/gradient_suite.hpp"
#include "aclseg/numerics/ops.hpp"
#include "aclseg/numerics/runtime.hpp"

using namespace aclseg;
namespace fs = std::filesystem;

namespace {

std::set<std::string> split_list(const std::string& text) {
    std::set<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.insert(item);
    return out;
}

int cmd_datagen(const cli::DatagenOptions& opts, const std::string& size) {
    auto o = opts;
    std::tie(o.height, o.width) = cli::parse_size(size);
    const auto m = cli::run_datagen(o);
    std::cout << "wrote " << m.sample_count() << " samples (" << m.height << "x" << m.width << ", "
              << m.train_per_class << " train per class, " << m.val.size() << " val, " << m.test.size() << " test) to "
              << o.out.string() << "\n";
    return cli::kOk;
}

int cmd_train(const fs::path& config_file, const std::vector<std::pair<std::string, nlohmann::json>>& overrides,
              bool force) {
    cli::ExperimentConfig merged;
    if (!config_file.empty()) merged.load_file(config_file);
    nlohmann::json flags = nlohmann::json::object();
    for (const auto& [k, v] : overrides) flags[k] = v;
    merged.merge_json(flags);
    const auto results = cli::run_train(merged, force);
    for (const auto& r : results) {
        std::cout << r.dir.string() << ":";
        if (r.joint) {
            for (int c = 1; c <= data::kNumClasses; ++c) {
                std::printf(" %s=%.4f", data::task_spec(c).name.c_str(), r.joint->ideal.of(c));
            }
        } else {
            std::printf(" overall_dice=%.4f", metrics::overall_dice(r.record->matrix.rows.back()));
            if (r.record->omega) {
                std::printf(" omega_base=%.4f omega_new=%.4f omega_all=%.4f", r.record->omega->omega_base,
                            r.record->omega->omega_new, r.record->omega->omega_all);
            }
        }
        std::cout << std::endl;
    }
    return cli::kOk;
}

int cmd_eval(const fs::path& run, const fs::path& data, const fs::path& out) {
    const auto res = cli::run_eval(run, data);
    const auto text = trainer::dump_json(res);
    if (!out.empty()) metrics::write_text(out, text);
    std::cout << text;
    return cli::kOk;
}

int cmd_report(const std::vector<fs::path>& runs, const std::vector<std::string>& ideals, const fs::path& out, bool force) {
    const auto r = cli::run_report(runs, ideals, out, force);
    std::cout << r.table_csv << "wrote " << (out / "omega_table.csv").string() << " and "
              << (out / "dice_curves.svg").string() << " from " << r.runs.size() << " runs\n";
    return cli::kOk;
}

int cmd_gradcheck(const std::string& ops, const std::string& fault) {
    num::injected_fault() = fault;
    const auto start = std::chrono::steady_clock::now();
    const auto results = run_gradient_suite(split_list(ops));
    std::vector<std::string> failing;
    for (const auto& r : results) {
        std::printf("%-24s max_rel_error %.3e  %s\n", r.op.c_str(), r.max_error, r.passed ? "ok" : "FAIL");
        if (!r.passed) failing.push_back(r.op);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%zu ops checked in %.2f s (tolerance %.0e)\n", results.size(), secs, kGradTolerance);
    if (failing.empty()) return cli::kOk;
    std::string names;
    for (const auto& f : failing) names += (names.empty() ? "" : ", ") + f;
    std::cerr << "gradient check failed for: " << names << "\n";
    return cli::kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    num::tune_allocator();
    CLI::App app{"Continual class-incremental segmentation lab"};
    app.require_subcommand(1);

    cli::DatagenOptions gen;
    std::string size = "128x128";
    auto* datagen = app.add_subcommand("datagen", "Generate the synthetic five-class benchmark");
    datagen->add_option("--seed", gen.seed, "Generator seed")->required();
    datagen->add_option("--out", gen.out, "Output directory")->required();
    datagen->add_option("--train-per-class", gen.counts.train_per_class, "Training images per class")->capture_default_str();
    datagen->add_option("--val", gen.counts.val, "Validation images")->capture_default_str();
    datagen->add_option("--test", gen.counts.test, "Test images")->capture_default_str();
    datagen->add_option("--size", size, "Image size HxW, both divisible by 16")->capture_default_str();
    datagen->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

    fs::path config_file, data_dir, out_dir, ideal_file;
    std::string method, order, variant, arch;
    std::size_t repeats = 0, batch_size = 0, max_epochs = 0;
    std::uint64_t seed = 0;
    double lr0 = 0, lwf_mu = 0;
    bool train_force = false;
    auto* train = app.add_subcommand("train", "Train a method over a task schedule, or jointly for the ideal reference");
    train->add_option("--config", config_file, "JSON config; flags override its values")->check(CLI::ExistingFile);
    train->add_option("--data", data_dir, "Dataset directory");
    train->add_option("--method", method, "aclseg, ft, lwf or joint");
    train->add_option("--arch", arch, "Architecture for joint training: unet or aclseg");
    train->add_option("--order", order, "Schedule preset A, B, C or a comma-separated class order");
    train->add_option("--variant", variant, "ACLSeg variant: basic_enc, aspp_ps or full");
    train->add_option("--out", out_dir, "Run directory");
    train->add_option("--repeats", repeats, "Number of seeds (consecutive from --seed)");
    train->add_option("--seed", seed, "Run seed");
    train->add_option("--epochs", max_epochs, "Maximum epochs per task");
    train->add_option("--batch-size", batch_size, "Images per batch");
    train->add_option("--lr", lr0, "Initial learning rate");
    train->add_option("--lwf-mu", lwf_mu, "Distillation weight for lwf");
    train->add_option("--ideal", ideal_file, "ideal_scores.json used to score the run");
    train->add_flag("--force", train_force, "Overwrite a non-empty run directory");

    fs::path eval_run, eval_data, eval_out;
    auto* eval = app.add_subcommand("eval", "Test Dice of a run's final checkpoint");
    eval->add_option("--run", eval_run, "Run directory")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--out", eval_out, "Also write the result to this JSON file");

    std::vector<fs::path> report_runs;
    std::vector<std::string> report_ideals;
    fs::path report_out;
    bool report_force = false;
    auto* rep = app.add_subcommand("report", "Omega table and Dice curves over finished runs");
    rep->add_option("--runs", report_runs, "Run directories, or parents of seed_* directories")->required();
    rep->add_option("--ideal", report_ideals, "Ideal reference, as FILE or METHOD=FILE");
    rep->add_option("--out", report_out, "Output directory")->required();
    rep->add_flag("--force", report_force, "Overwrite an existing report");

    std::string ops, fault;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and loss");
    grad->add_option("--ops", ops, "Comma-separated subset of ops");
    grad->add_option("--inject-fault", fault)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::kOk : cli::kInvalid;
    }

    try {
        if (*datagen) return cmd_datagen(gen, size);
        if (*train) {
            std::vector<std::pair<std::string, nlohmann::json>> flags;
            const auto set = [&](const char* opt, const char* key, nlohmann::json v) {
                if (train->count(opt)) flags.emplace_back(key, std::move(v));
            };
            set("--data", "data", data_dir.string());
            set("--method", "method", method);
            set("--arch", "arch", arch);
            set("--order", "order", order);
            set("--variant", "variant", variant);
            set("--out", "out", out_dir.string());
            set("--repeats", "repeats", repeats);
            set("--seed", "seed", seed);
            set("--epochs", "max_epochs", max_epochs);
            set("--batch-size", "batch_size", batch_size);
            set("--lr", "lr0", lr0);
            set("--lwf-mu", "lwf_mu", lwf_mu);
            set("--ideal", "ideal", ideal_file.string());
            return cmd_train(config_file, flags, train_force);
        }
        if (*eval) return cmd_eval(eval_run, eval_data, eval_out);
        if (*rep) return cmd_report(report_runs, report_ideals, report_out, report_force);
        if (*grad) return cmd_gradcheck(ops, fault);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kInvalid;
    } catch (const cli::Refusal& e) {
        std::cerr << "refusing: " << e.what() << "\n";
        return cli::kInvalid;
    } catch (const MissingPrerequisite& e) {
        std::cerr << "missing: " << e.what() << "\n";
        return cli::kMissing;
    } catch (const TrainingAborted& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return cli::kFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kFailure;
    }
    return cli::kOk;
}
