#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ernie/certify.hpp"
#include "ernie/config.hpp"
#include "ernie/errors.hpp"
#include "ernie/trainer.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kCheckFailed = 3;
constexpr int kIoError = 4;

/// --out beats ERNIE_LAB_OUT, which beats the configured directory.
std::string resolve_out(const std::string& flag, const std::string& configured) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("ERNIE_LAB_OUT"); env != nullptr && *env != '\0') return env;
    return configured;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ernie_lab: adversarially regularized multi-agent RL laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_flag, checkpoint;
    std::optional<std::uint64_t> seed;
    int instances = 200;
    bool negative_control = false;

    auto* train = app.add_subcommand("train", "train one run per seed");
    train->add_option("--config", config_path, "experiment config (JSON)")->required();
    train->add_option("--seed", seed, "train only this seed");
    train->add_option("--out", out_flag, "output directory");

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint over the perturbation sweep");
    evaluate->add_option("--config", config_path, "experiment config (JSON)")->required();
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint directory or manifest.json")->required();
    evaluate->add_option("--out", out_flag, "output directory");

    auto* certify = app.add_subcommand("certify", "certify the smoothness and robustness bounds on random MDPs");
    certify->add_option("--instances", instances, "number of random instances")->check(CLI::PositiveNumber);
    certify->add_option("--seed", seed, "instance seed");
    certify->add_option("--out", out_flag, "output directory");
    certify->add_flag("--negative-control", negative_control, "add a deliberately mislabeled instance");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of all analytic gradients");
    gradcheck->add_option("--seed", seed, "seed");
    gradcheck->add_option("--out", out_flag, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (train->parsed()) {
            ernie::cfg::ExperimentConfig c = ernie::cfg::load_config(config_path);
            if (seed) c.seeds = {*seed};
            const std::string out = resolve_out(out_flag, c.out_dir);
            c.out_dir = out;
            auto runs = ernie::train::cmd_train(c, out);
            for (std::size_t i = 0; i < runs.size(); ++i) {
                const auto& rows = runs[i].rows;
                std::cout << "seed " << c.seeds[i] << ": " << runs[i].episode_returns.size() << " episodes";
                if (!rows.empty())
                    std::cout << ", last interval return " << ernie::train::format_double(rows.back().episodic_return_mean);
                std::cout << '\n';
            }
            std::cout << "wrote " << out << '\n';
        } else if (evaluate->parsed()) {
            ernie::cfg::ExperimentConfig c = ernie::cfg::load_config(config_path);
            const std::string out =
                resolve_out(out_flag, (std::filesystem::path(c.out_dir) / "eval").string());
            auto summary = ernie::train::cmd_evaluate(c, checkpoint, out);
            for (const auto& s : summary)
                std::cout << "sigma=" << s.spec.obs_noise_sigma << " scale=" << s.spec.dynamics_scale
                          << " malicious=" << s.spec.malicious_rate << " mean=" << s.mean << " p10=" << s.p10
                          << " p50=" << s.p50 << " p90=" << s.p90 << '\n';
            std::cout << "wrote " << out << '\n';
        } else if (certify->parsed()) {
            ernie::certify::CertifyOptions o;
            o.instances = instances;
            o.gap_instances = std::min(o.gap_instances, instances);
            o.seed = seed.value_or(0);
            o.negative_control = negative_control;
            auto rep = ernie::certify::run_certify(o);
            const std::string path =
                ernie::certify::write_report(rep.to_json(), resolve_out(out_flag, "runs"), "theory_report.json");
            for (const auto& s : rep.suites)
                std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << " checks=" << s.checks
                          << " max_excess=" << s.max_excess << '\n';
            std::cout << "wrote " << path << '\n';
            return rep.passed() ? kOk : kCheckFailed;
        } else if (gradcheck->parsed()) {
            ernie::certify::GradcheckOptions o;
            o.seed = seed.value_or(0);
            auto rep = ernie::certify::run_gradcheck(o);
            const std::string path =
                ernie::certify::write_report(rep.to_json(), resolve_out(out_flag, "runs"), "gradcheck_report.json");
            for (const auto& s : rep.suites)
                std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << " cases=" << s.cases
                          << " max_rel_error=" << s.max_rel_error << (s.exact ? " (exact)" : "") << '\n';
            std::cout << "wrote " << path << '\n';
            return rep.passed() ? kOk : kCheckFailed;
        }
    } catch (const ernie::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIoError;
    } catch (const ernie::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const ernie::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kIoError;
    }
    return kOk;
}
