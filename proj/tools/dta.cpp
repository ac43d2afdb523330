// Command-line front end: dataset fetching, training, evaluation, the
// brute-force solver oracle, and report/plot generation.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dta/config.hpp"
#include "dta/datasets.hpp"
#include "dta/fetch.hpp"
#include "dta/oracle.hpp"
#include "dta/report.hpp"
#include "dta/train.hpp"

// keep last: its platform headers leak macros that clash with Eigen
#include <CLI11.hpp>
#include <httplib.h>

namespace fs = std::filesystem;

namespace {

fs::path resolve_data_root(const std::string& flag, const std::string& from_config) {
    if (!flag.empty()) return flag;
    if (!from_config.empty()) return from_config;
    if (const char* env = std::getenv("DATA_ROOT")) return env;
    return "data";
}

fs::path resolve_output_root() {
    if (const char* env = std::getenv("OUTPUT_ROOT")) return env;
    return "runs";
}

bool http_download(const std::string& url, const fs::path& dest) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return false;
    const auto host_end = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, host_end);
    const std::string path = host_end == std::string::npos ? "/" : url.substr(host_end);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (origin.rfind("https", 0) == 0) {
        std::cerr << "built without TLS support; cannot fetch " << url << "\n";
        return false;
    }
#endif
    httplib::Client client(origin);
    client.set_follow_location(true);
    client.set_connection_timeout(30);
    client.set_read_timeout(300);
    std::ofstream out(dest, std::ios::binary | std::ios::trunc);
    if (!out) return false;
    auto res = client.Get(path, [&](const char* data, size_t n) {
        out.write(data, static_cast<std::streamsize>(n));
        return static_cast<bool>(out);
    });
    return res && res->status == 200 && out.good();
}

int cmd_fetch(const std::vector<std::string>& names, const std::string& data_root_flag) {
    const fs::path root = resolve_data_root(data_root_flag, "");
    const std::vector<std::string> wanted =
        names.empty() ? std::vector<std::string>{"mnist", "usps", "svhn", "cifar10", "stl10"} : names;
    int failures = 0;
    for (const auto& name : wanted) {
        std::cout << "fetch " << name << " -> " << root.string() << "\n";
        try {
            dta::fetch_dataset(name, root, http_download, std::cout);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            ++failures;
        }
    }
    return failures == 0 ? 0 : 1;
}

dta::ExperimentConfig load_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
    dta::ExperimentConfig cfg = config_path.empty() ? dta::ExperimentConfig{}
                                                    : dta::ExperimentConfig::parse_file(config_path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_root_flag, const std::string& output_flag,
              const std::string& resume, const std::string& debug_dump_path) {
    auto cfg = load_config(config_path, overrides);
    if (cfg.pair.empty()) throw std::invalid_argument("config: 'pair' is required");
    const fs::path data_root = resolve_data_root(data_root_flag, cfg.data_root);
    fs::path out_dir = !output_flag.empty()
                           ? fs::path(output_flag)
                           : (!cfg.output_dir.empty() ? fs::path(cfg.output_dir)
                                                      : resolve_output_root() / cfg.pair);

    std::cout << "root seed: " << cfg.train.seed << "\n";
    std::cout << "loading pair " << cfg.pair << " from " << data_root.string() << "\n";
    auto pair = dta::load_pair(cfg.pair, data_root, cfg.subsample, cfg.train.seed);
    std::cout << "source " << pair.source_train.count() << ", target " << pair.target_train.count()
              << ", test " << pair.target_test.count() << ", input " << pair.channels << "x"
              << pair.height << "x" << pair.width << "\n";

    dta::Trainer<float> trainer(cfg.train, pair);
    std::optional<fs::path> resume_from;
    if (!resume.empty()) resume_from = resume;
    std::optional<dta::DebugDump> debug;
    if (!debug_dump_path.empty()) {
        std::error_code ec;
        fs::create_directories(fs::path(debug_dump_path).parent_path(), ec);
        debug.emplace(debug_dump_path);
    }
    auto result = trainer.run(out_dir, resume_from, &std::cout, debug ? &*debug : nullptr);
    std::cout << "final target accuracy: " << result.final_accuracy << "\n";
    std::cout << "best target accuracy:  " << result.best_accuracy << "\n";
    std::cout << "metrics: " << (out_dir / "metrics.csv").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& pair_name,
             const std::vector<std::string>& overrides, const std::string& data_root_flag) {
    auto cfg = load_config("", overrides);
    const std::string pair_id = !pair_name.empty() ? pair_name : cfg.pair;
    if (pair_id.empty()) throw std::invalid_argument("eval: --pair (or --set pair=...) is required");
    const fs::path data_root = resolve_data_root(data_root_flag, cfg.data_root);
    auto ck = dta::Checkpoint<float>::load(checkpoint);
    auto pair = dta::load_pair(pair_id, data_root, cfg.subsample, ck.seed);
    auto net = dta::build_network<float>(ck.arch, ck.seed);
    dta::Optimizer<float> opt(dta::OptimizerKind::adam, 1e-3, net.param_count());
    ck.restore_into(net, opt);
    const double acc = dta::evaluate(net, pair);
    std::cout << "pair " << pair_id << " checkpoint " << checkpoint << "\n";
    std::cout << "target accuracy: " << acc << "\n";
    return 0;
}

int cmd_oracle(int trials, std::uint64_t seed, int element_len, int channels,
               std::optional<std::int64_t> budget) {
    dta::oracle::OracleOptions opt;
    opt.trials = trials;
    opt.seed = seed;
    opt.element_len = element_len;
    opt.channels = channels;
    opt.budget_override = budget;
    std::cout << "mask-solver oracle: " << trials << " trials, L=" << element_len
              << ", C=" << channels << ", seed " << seed << "\n";
    auto report = dta::oracle::run_mask_oracle<double>(opt, &std::cout);
    report.print(std::cout);
    return report.all_pass() ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& metrics_paths, const std::string& out_dir) {
    std::vector<dta::RunSummary> runs;
    std::vector<fs::path> charts;
    for (const auto& p : metrics_paths) {
        runs.push_back(dta::summarize_metrics(p));
        auto written = dta::write_run_charts(p, out_dir);
        charts.insert(charts.end(), written.begin(), written.end());
    }
    const std::string table = dta::render_comparison_table(runs);
    std::cout << table;
    std::ofstream summary(fs::path(out_dir) / "summary.txt", std::ios::trunc);
    summary << table;
    for (const auto& c : charts) std::cout << "wrote " << c.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Drop-to-adapt: adversarial-dropout unsupervised domain adaptation"};
    app.require_subcommand(1);

    auto* fetch = app.add_subcommand("fetch", "download and verify datasets");
    std::vector<std::string> fetch_names;
    std::string fetch_root;
    fetch->add_option("datasets", fetch_names, "datasets (default: all five)");
    fetch->add_option("--data-root", fetch_root, "dataset cache directory");

    auto* train = app.add_subcommand("train", "run a training experiment");
    std::string train_config, train_root, train_out, train_resume, train_debug;
    std::vector<std::string> train_sets;
    train->add_option("--config", train_config, "experiment config file");
    train->add_option("--set", train_sets, "override config keys (key=value)");
    train->add_option("--data-root", train_root, "dataset cache directory");
    train->add_option("--output", train_out, "output directory");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--debug-dump", train_debug, "write per-step solver telemetry CSV");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a pair's target test set");
    std::string eval_ckpt, eval_pair, eval_root;
    std::vector<std::string> eval_sets;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--pair", eval_pair, "pair configuration name");
    eval->add_option("--set", eval_sets, "config overrides (key=value)");
    eval->add_option("--data-root", eval_root, "dataset cache directory");

    auto* oracle = app.add_subcommand("oracle", "run the brute-force mask-solver checks");
    int oracle_trials = 100, oracle_len = 8, oracle_channels = 6;
    std::uint64_t oracle_seed = 0;
    std::int64_t oracle_budget = -1;
    oracle->add_option("--trials", oracle_trials, "number of seeded trials");
    oracle->add_option("--seed", oracle_seed, "root seed");
    oracle->add_option("--element-len", oracle_len, "element site width (<= 12)");
    oracle->add_option("--channels", oracle_channels, "channel count (<= 8)");
    oracle->add_option("--budget", oracle_budget, "fixed flip budget (default: random 1-2)");

    auto* report = app.add_subcommand("report", "summarize metrics CSVs and plot curves");
    std::vector<std::string> report_paths;
    std::string report_out = "report";
    report->add_option("metrics", report_paths, "metrics.csv files")->required();
    report->add_option("--out", report_out, "output directory for plots and summary");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*fetch) return cmd_fetch(fetch_names, fetch_root);
        if (*train)
            return cmd_train(train_config, train_sets, train_root, train_out, train_resume,
                             train_debug);
        if (*eval) return cmd_eval(eval_ckpt, eval_pair, eval_sets, eval_root);
        if (*oracle)
            return cmd_oracle(oracle_trials, oracle_seed, oracle_len, oracle_channels,
                              oracle_budget >= 0 ? std::optional<std::int64_t>(oracle_budget)
                                                 : std::nullopt);
        if (*report) return cmd_report(report_paths, report_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
