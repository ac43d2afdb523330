#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dta/errors.hpp"

namespace dta {

/// One metrics row per epoch; the column set is the on-disk CSV schema.
struct MetricsRow {
    int epoch = 0;
    double task = 0, fdta = 0, cdta = 0, entropy = 0, vat = 0, total = 0;
    double delta_e = 0, delta_c = 0;
    double target_accuracy = 0;
    double wall_seconds = 0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,task,fdta,cdta,entropy,vat,total,delta_e,delta_c,target_accuracy,wall_seconds";

class MetricsWriter {
public:
    MetricsWriter(const std::filesystem::path& path, const std::map<std::string, std::string>& meta,
                  bool append = false)
        : out_(path, append ? std::ios::app : std::ios::trunc) {
        if (!out_) throw io_error("cannot open metrics file " + path.string());
        if (!append) {
            out_ << "#";
            for (const auto& [k, v] : meta) out_ << " " << k << "=" << v;
            out_ << "\n" << kMetricsHeader << "\n";
        }
    }

    void append(const MetricsRow& r) {
        out_.precision(10);
        out_ << r.epoch << ',' << r.task << ',' << r.fdta << ',' << r.cdta << ',' << r.entropy << ','
             << r.vat << ',' << r.total << ',' << r.delta_e << ',' << r.delta_c << ','
             << r.target_accuracy << ',' << r.wall_seconds << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

struct MetricsFile {
    std::map<std::string, std::string> meta;
    std::vector<MetricsRow> rows;
};

inline MetricsFile read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open metrics file " + path.string());
    MetricsFile file;
    std::string line;
    bool saw_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string kv;
            while (ls >> kv) {
                const auto eq = kv.find('=');
                if (eq != std::string::npos) file.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
            }
            continue;
        }
        if (!saw_header) {
            if (line != kMetricsHeader)
                throw io_error("unexpected metrics header in " + path.string() + ": " + line);
            saw_header = true;
            continue;
        }
        std::istringstream ls(line);
        MetricsRow r;
        char comma;
        ls >> r.epoch >> comma >> r.task >> comma >> r.fdta >> comma >> r.cdta >> comma >> r.entropy >>
            comma >> r.vat >> comma >> r.total >> comma >> r.delta_e >> comma >> r.delta_c >> comma >>
            r.target_accuracy >> comma >> r.wall_seconds;
        if (!ls) throw io_error("malformed metrics row in " + path.string() + ": " + line);
        file.rows.push_back(r);
    }
    if (!saw_header) throw io_error("metrics file has no header: " + path.string());
    return file;
}

}  // namespace dta
