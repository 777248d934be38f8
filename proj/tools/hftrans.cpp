// Command-line front end: gen-data, train, eval, ablate, grad-check, info.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "hftrans/hftrans.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
    auto* opt = cmd->add_option("--config", c.config, "run configuration file");
    if (config_required) opt->required();
    cmd->add_option("--seed", c.seed, "overrides the configured seed");
    cmd->add_option("--out", c.out, "output directory");
}

hft::RunConfig resolve(const Common& c) {
    hft::RunConfig cfg = c.config.empty() ? hft::RunConfig{} : hft::load_run_config(c.config);
    if (c.seed) cfg.apply_seed(*c.seed);
    if (c.out) cfg.out = *c.out;
    cfg.validate();
    return cfg;
}

void print_info(const hft::RunConfig& cfg) {
    const hft::Model<float> model(cfg.model);
    const auto& mc = model.config();
    std::cout << "fusion       " << hft::to_string(mc.fusion) << '\n'
              << "encoders     " << model.encoder_count() << " (" << hft::describe(model.fusion()) << ")\n"
              << "extents      " << mc.extents[0] << 'x' << mc.extents[1] << 'x' << mc.extents[2] << '\n'
              << "tokens       " << mc.token_count() << '\n'
              << "parameters   " << hft::count_parameters(model.params()) << '\n'
              << "macs         " << hft::estimate_flops(mc) << '\n';
}

int grad_check_table(std::size_t instances, std::uint64_t seed) {
    hft::GradCheckOptions opt;
    opt.tolerance = hft::kGradTolerance;
    const auto reports = hft::run_grad_suite(instances, seed, opt);
    bool all = true;
    std::printf("%-20s %-6s %10s %8s %8s\n", "primitive", "result", "worst_rel", "checked", "skipped");
    for (const auto& r : reports) {
        all = all && r.passed;
        std::printf("%-20s %-6s %10.3e %8zu %8zu\n", r.name.c_str(), r.passed ? "pass" : "FAIL",
                    r.worst_relative_error, r.checked, r.skipped);
        if (!r.passed) std::printf("    worst at %s\n", r.worst_location.c_str());
    }
    return all ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid-fusion transformer for multi-modal 3D segmentation"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, ablate_c, grad_c, info_c;
    std::string checkpoint;
    std::size_t instances = 20;

    auto* gen = app.add_subcommand("gen-data", "write phantom volumes and a manifest");
    add_common(gen, gen_c, true);
    auto* train = app.add_subcommand("train", "train a model, write checkpoint and loss log");
    add_common(train, train_c, true);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint, write metrics CSVs");
    add_common(eval, eval_c, true);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.hftc)");
    auto* ablate = app.add_subcommand("ablate", "k-fold comparison of fusion modes");
    add_common(ablate, ablate_c, true);
    auto* grad = app.add_subcommand("grad-check", "finite-difference check of every primitive");
    add_common(grad, grad_c, false);
    grad->add_option("--instances", instances, "random instances per primitive")->check(CLI::PositiveNumber);
    auto* info = app.add_subcommand("info", "parameter and MAC counts for a configuration");
    add_common(info, info_c, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    hft::RunConfig cfg;
    try {
        if (*gen) cfg = resolve(gen_c);
        else if (*train) cfg = resolve(train_c);
        else if (*eval) cfg = resolve(eval_c);
        else if (*ablate) cfg = resolve(ablate_c);
        else if (*grad) cfg = resolve(grad_c);
        else cfg = resolve(info_c);
    } catch (const hft::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }

    try {
        if (*gen) {
            std::cout << "wrote " << hft::run_gen_data(cfg).string() << '\n';
        } else if (*train) {
            const auto start = std::chrono::steady_clock::now();
            const std::size_t every = std::max<std::size_t>(1, cfg.steps / 20);
            auto log = [&](std::size_t step, double loss) {
                if (step % every == 0 || step + 1 == cfg.steps) {
                    const double secs =
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                    std::fprintf(stderr, "step %zu/%zu loss %.6f (%.1fs)\n", step + 1, cfg.steps, loss, secs);
                }
            };
            hft::run_train(cfg, log);
            std::cout << "wrote " << (cfg.out / "checkpoint.hftc").string() << " and "
                      << (cfg.out / "loss.csv").string() << '\n';
        } else if (*eval) {
            const auto path = checkpoint.empty() ? cfg.out / "checkpoint.hftc" : std::filesystem::path(checkpoint);
            hft::write_metrics_csv(std::cout, hft::run_eval(cfg, path));
        } else if (*ablate) {
            const auto result = hft::run_ablation(cfg, [](const std::string& s) { std::cerr << s << '\n'; });
            hft::write_ablation(cfg, result);
            hft::write_ablation_csv(std::cout, result);
        } else if (*grad) {
            return grad_check_table(instances, cfg.seed);
        } else {
            print_info(cfg);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return 0;
}
