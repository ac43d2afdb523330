#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dta/datasets.hpp"
#include "dta/errors.hpp"
#include "dta/train.hpp"

namespace dta {

/// Experiment file: flat `key = value` lines with dotted keys, `#` comments.
/// Unknown keys are rejected by name; values round-trip losslessly through
/// serialize()/parse(). Command-line `--set key=value` overrides reuse the
/// same key set.
struct ExperimentConfig {
    std::string pair;
    std::string output_dir;
    std::string data_root;  // empty = resolve from DATA_ROOT / --data-root
    SubsampleSpec subsample;
    DTAConfig train;

    void set(const std::string& key, const std::string& value) {
        auto as_double = [&](const char* name) {
            try {
                return std::stod(value);
            } catch (const std::exception&) {
                throw std::invalid_argument(std::string("config: bad number for '") + name + "': " + value);
            }
        };
        auto as_int = [&](const char* name) {
            try {
                return std::stoll(value);
            } catch (const std::exception&) {
                throw std::invalid_argument(std::string("config: bad integer for '") + name + "': " + value);
            }
        };
        auto as_bool = [&](const char* name) {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw std::invalid_argument(std::string("config: bad boolean for '") + name + "': " + value);
        };

        if (key == "pair") pair = value;
        else if (key == "output_dir") output_dir = value;
        else if (key == "data_root") data_root = value;
        else if (key == "arch") train.arch = value;
        else if (key == "lambda1") train.lambda1 = as_double("lambda1");
        else if (key == "lambda2") train.lambda2 = as_double("lambda2");
        else if (key == "lambda3") train.lambda3 = as_double("lambda3");
        else if (key == "delta_e") train.max_delta_e = as_double("delta_e");
        else if (key == "delta_c") train.max_delta_c = as_double("delta_c");
        else if (key == "epsilon") train.epsilon = as_double("epsilon");
        else if (key == "rho_s") train.rho_s = as_double("rho_s");
        else if (key == "ramp_epochs") train.ramp_epochs = static_cast<int>(as_int("ramp_epochs"));
        else if (key == "epochs") train.epochs = static_cast<int>(as_int("epochs"));
        else if (key == "batch_size") train.batch_size = static_cast<int>(as_int("batch_size"));
        else if (key == "seed") train.seed = static_cast<std::uint64_t>(as_int("seed"));
        else if (key == "eval_batch") train.eval_batch = static_cast<int>(as_int("eval_batch"));
        else if (key == "optimizer.kind") train.optimizer = optimizer_kind_from(value);
        else if (key == "optimizer.lr") train.lr = as_double("optimizer.lr");
        else if (key == "optimizer.decay_factor") train.lr_decay_factor = as_double("optimizer.decay_factor");
        else if (key == "optimizer.decay_epochs") {
            train.lr_decay_epochs.clear();
            std::istringstream ls(value);
            std::string tok;
            while (std::getline(ls, tok, ','))
                if (!tok.empty()) train.lr_decay_epochs.push_back(std::stoi(tok));
        } else if (key == "use_fdta") train.use_fdta = as_bool("use_fdta");
        else if (key == "use_cdta") train.use_cdta = as_bool("use_cdta");
        else if (key == "use_entropy") train.use_entropy = as_bool("use_entropy");
        else if (key == "use_vat") train.use_vat = as_bool("use_vat");
        else if (key == "vat.xi") train.vat.xi = as_double("vat.xi");
        else if (key == "vat.power_iters") train.vat.power_iters = static_cast<int>(as_int("vat.power_iters"));
        else if (key == "augment.hflip") {
            if (value == "auto") train.hflip.reset();
            else train.hflip = as_bool("augment.hflip");
        } else if (key == "subsample.source") subsample.source = as_int("subsample.source");
        else if (key == "subsample.target") subsample.target = as_int("subsample.target");
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }

    static ExperimentConfig parse(std::istream& in) {
        ExperimentConfig cfg;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                            " is not `key = value`: " + t);
            cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
        }
        return cfg;
    }

    static ExperimentConfig parse_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw io_error("cannot open config " + path.string());
        return parse(in);
    }

    std::string serialize() const {
        auto num = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        std::ostringstream os;
        os << "pair = " << pair << "\n";
        os << "arch = " << train.arch << "\n";
        if (!output_dir.empty()) os << "output_dir = " << output_dir << "\n";
        if (!data_root.empty()) os << "data_root = " << data_root << "\n";
        os << "epochs = " << train.epochs << "\n";
        os << "batch_size = " << train.batch_size << "\n";
        os << "seed = " << train.seed << "\n";
        os << "lambda1 = " << num(train.lambda1) << "\n";
        os << "lambda2 = " << num(train.lambda2) << "\n";
        os << "lambda3 = " << num(train.lambda3) << "\n";
        os << "delta_e = " << num(train.max_delta_e) << "\n";
        os << "delta_c = " << num(train.max_delta_c) << "\n";
        os << "epsilon = " << num(train.epsilon) << "\n";
        os << "rho_s = " << num(train.rho_s) << "\n";
        os << "ramp_epochs = " << train.ramp_epochs << "\n";
        os << "optimizer.kind = " << optimizer_kind_name(train.optimizer) << "\n";
        os << "optimizer.lr = " << num(train.lr) << "\n";
        os << "optimizer.decay_factor = " << num(train.lr_decay_factor) << "\n";
        if (!train.lr_decay_epochs.empty()) {
            os << "optimizer.decay_epochs = ";
            for (std::size_t i = 0; i < train.lr_decay_epochs.size(); ++i)
                os << (i ? "," : "") << train.lr_decay_epochs[i];
            os << "\n";
        }
        os << "use_fdta = " << (train.use_fdta ? "true" : "false") << "\n";
        os << "use_cdta = " << (train.use_cdta ? "true" : "false") << "\n";
        os << "use_entropy = " << (train.use_entropy ? "true" : "false") << "\n";
        os << "use_vat = " << (train.use_vat ? "true" : "false") << "\n";
        os << "vat.xi = " << num(train.vat.xi) << "\n";
        os << "vat.power_iters = " << train.vat.power_iters << "\n";
        os << "augment.hflip = "
           << (train.hflip ? (*train.hflip ? "true" : "false") : "auto") << "\n";
        os << "eval_batch = " << train.eval_batch << "\n";
        if (subsample.source > 0) os << "subsample.source = " << subsample.source << "\n";
        if (subsample.target > 0) os << "subsample.target = " << subsample.target << "\n";
        return os.str();
    }
};

}  // namespace dta
