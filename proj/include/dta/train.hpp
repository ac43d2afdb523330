#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dta/checkpoint.hpp"
#include "dta/datasets.hpp"
#include "dta/metrics.hpp"
#include "dta/network.hpp"
#include "dta/objectives.hpp"
#include "dta/optim.hpp"
#include "dta/schedule.hpp"

namespace dta {

/// Full experiment configuration. The loss weights stay constant over
/// training; only the perturbation magnitudes ramp.
struct DTAConfig {
    std::string arch = "small-3conv-2fc";
    double lambda1 = 2.0;
    double lambda2 = 0.01;
    double lambda3 = 0.1;
    double max_delta_e = 0.1;
    double max_delta_c = 0.05;
    double epsilon = 3.5;
    double rho_s = 0.1;
    int ramp_epochs = 80;
    int epochs = 90;
    int batch_size = 64;
    std::uint64_t seed = 1;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    double lr_decay_factor = 0.1;
    std::vector<int> lr_decay_epochs;  // empty = thirds of the run
    bool use_fdta = true;
    bool use_cdta = true;
    bool use_entropy = true;
    bool use_vat = true;
    VatSettings vat;
    std::optional<bool> hflip;  // unset = the pair's default
    int eval_batch = 250;

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!in01(max_delta_e) || !in01(max_delta_c) || !in01(rho_s))
            throw std::invalid_argument("DTAConfig: magnitudes must lie in [0,1]");
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
            throw std::invalid_argument("DTAConfig: negative loss weight");
        if (epsilon < 0) throw std::invalid_argument("DTAConfig: negative epsilon");
        if (ramp_epochs < 1) throw std::invalid_argument("DTAConfig: ramp period must be >= 1");
        if (epochs < 0) throw std::invalid_argument("DTAConfig: negative epoch count");
        if (batch_size < 1) throw std::invalid_argument("DTAConfig: batch size must be >= 1");
        if (lr <= 0) throw std::invalid_argument("DTAConfig: learning rate must be > 0");
    }

    std::vector<int> decay_epochs_or_default() const {
        if (!lr_decay_epochs.empty()) return lr_decay_epochs;
        if (epochs < 3) return {};
        return {epochs / 3, 2 * epochs / 3};
    }

    bool adaptation_active() const {
        return (lambda1 > 0 && (use_fdta || use_cdta)) || (lambda2 > 0 && use_entropy) ||
               (lambda3 > 0 && use_vat);
    }

    AdaptationState state_at(int epoch) const {
        AdaptationState st;
        const RampSchedule ramp{ramp_epochs, max_delta_e, max_delta_c};
        auto [de, dc] = ramp.current_magnitudes(epoch);
        st.delta_e = de;
        st.delta_c = dc;
        st.epsilon = epsilon;  // not ramped
        st.rho_s = rho_s;
        st.use_fdta = use_fdta;
        st.use_cdta = use_cdta;
        st.use_entropy = use_entropy;
        st.use_vat = use_vat;
        st.vat = vat;
        return st;
    }

    /// Per-(epoch, step) randomness, independent of all other streams, so a
    /// resumed run replays the exact same draws.
    Rng step_rng(int epoch, int step) const {
        return Rng(Rng::splitmix64(Rng::splitmix64(seed ^ 0x57e9u) ^
                                   (static_cast<std::uint64_t>(epoch) << 24) ^
                                   static_cast<std::uint64_t>(step)));
    }
};

/// One optimization step on all parameters: evaluates the ramped objective,
/// accumulates gradients, applies the update. Returns the pre-update
/// breakdown.
template <typename T>
LossBreakdown<T> train_step(Network<T>& net, Optimizer<T>& opt, const Tensor<T>& source_x,
                            const std::vector<int>& source_y, const Tensor<T>& target_x,
                            const DTAConfig& cfg, int epoch, Rng& rng,
                            FrozenPerturbations<T>* capture = nullptr) {
    const LossWeights<T> w{static_cast<T>(cfg.lambda1), static_cast<T>(cfg.lambda2),
                           static_cast<T>(cfg.lambda3)};
    net.zero_grads();
    LossBreakdown<T> bd = total_loss(net, source_x, source_y, target_x, w, cfg.state_at(epoch), rng,
                                     /*sink=*/true, /*update_stats=*/true, nullptr, capture);
    opt.step(net.params(), net.grads());
    return bd;
}

/// Target-domain accuracy: evaluation mode, no masks, no stochastic layers.
template <typename T>
double evaluate(const Network<T>& net, const DomainPair& pair, int eval_batch = 250) {
    const std::int64_t n = pair.target_test.count();
    if (n == 0) throw std::invalid_argument("evaluate: empty test set");
    DomainBatcher<T> batcher(pair, 1, 0, false, /*with_target=*/false);
    std::int64_t correct = 0;
    for (std::int64_t begin = 0; begin < n; begin += eval_batch) {
        const std::int64_t end = std::min(n, begin + eval_batch);
        Tensor<T> x = batcher.eval_batch(begin, end);
        Tensor<T> probs = net.forward(x);
        const int k = probs.dim(1);
        for (std::int64_t b = 0; b < end - begin; ++b) {
            int arg = 0;
            for (int c = 1; c < k; ++c)
                if (probs[b * k + c] > probs[b * k + arg]) arg = c;
            correct += arg == pair.target_test.labels[static_cast<std::size_t>(begin + b)];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

/// Per-step solver telemetry rows (optional debug dump).
struct DebugDump {
    std::ofstream out;

    explicit DebugDump(const std::filesystem::path& path) : out(path, std::ios::trunc) {
        if (!out) throw io_error("cannot open debug dump " + path.string());
        out << "epoch,step,kind,impact_min,impact_max,impact_mean,impact_abs_mean,"
               "impact_histogram,flips,budget,mask_s,mask_adv\n";
    }

    template <typename T, typename MaskT>
    void row(int epoch, int step, const char* kind, const std::vector<T>& impact,
             const MaskT& m_s, const MaskT& m_adv, std::int64_t budget) {
        double lo = 0, hi = 0, mean = 0, abs_mean = 0;
        if (!impact.empty()) {
            lo = hi = static_cast<double>(impact[0]);
            for (const T& v : impact) {
                lo = std::min(lo, static_cast<double>(v));
                hi = std::max(hi, static_cast<double>(v));
                mean += static_cast<double>(v);
                abs_mean += std::abs(static_cast<double>(v));
            }
            mean /= static_cast<double>(impact.size());
            abs_mean /= static_cast<double>(impact.size());
        }
        // 8 equal-width bins over [min, max], rendered as counts joined by |.
        std::array<int, 8> hist{};
        if (!impact.empty() && hi > lo) {
            for (const T& v : impact) {
                int bin = static_cast<int>((static_cast<double>(v) - lo) / (hi - lo) * 8);
                hist[static_cast<std::size_t>(std::clamp(bin, 0, 7))]++;
            }
        } else {
            hist[0] = static_cast<int>(impact.size());
        }
        out << epoch << ',' << step << ',' << kind << ',' << lo << ',' << hi << ',' << mean << ','
            << abs_mean << ',';
        for (std::size_t i = 0; i < hist.size(); ++i) out << (i ? "|" : "") << hist[i];
        out << ',' << mask_distance(m_adv, m_s) << ',' << budget << ',' << bits(m_s) << ','
            << bits(m_adv) << '\n';
    }

private:
    static std::string bits(const ElementMask& m) {
        std::string s;
        for (auto v : m.values) s += v ? '1' : '0';
        return s;
    }
    static std::string bits(const ChannelMask& m) {
        std::string s;
        for (auto v : m.channel_bits) s += v ? '1' : '0';
        return s;
    }
};

template <typename T>
struct TrainResult {
    std::vector<MetricsRow> history;
    double best_accuracy = 0.0;
    double final_accuracy = 0.0;
    std::filesystem::path best_checkpoint, last_checkpoint;
};

/// Drives a full experiment: ramped training epochs, per-epoch evaluation,
/// metrics CSV, best/last checkpoints, optional resume.
template <typename T>
class Trainer {
public:
    Trainer(DTAConfig cfg, const DomainPair& pair)
        : cfg_(std::move(cfg)),
          pair_(&pair),
          net_(build_network<T>(
              ArchitectureId{cfg_.arch, {pair.channels, pair.height, pair.width}, pair.num_classes},
              cfg_.seed)),
          opt_(cfg_.optimizer, cfg_.lr, net_.param_count()),
          batcher_(pair, cfg_.batch_size, cfg_.seed, cfg_.hflip.value_or(pair.default_hflip),
                   cfg_.adaptation_active()) {
        cfg_.validate();
    }

    Network<T>& network() { return net_; }
    Optimizer<T>& optimizer() { return opt_; }
    const DTAConfig& config() const { return cfg_; }
    int steps_per_epoch() const { return batcher_.steps_per_epoch(); }

    LossBreakdown<T> step(int epoch, int step_index, FrozenPerturbations<T>* capture = nullptr) {
        auto batch = batcher_.batch(epoch, step_index);
        Rng rng = cfg_.step_rng(epoch, step_index);
        return train_step(net_, opt_, batch.source_x, batch.source_y, batch.target_x, cfg_, epoch,
                          rng, capture);
    }

    double evaluate_target() const { return evaluate(net_, *pair_, cfg_.eval_batch); }

    TrainResult<T> run(const std::filesystem::path& output_dir,
                       const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                       std::ostream* log = nullptr, DebugDump* debug = nullptr) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(output_dir, ec);
        if (ec) throw io_error("cannot create output dir " + output_dir.string());

        int start_epoch = 0;
        double best_acc = 0.0;
        if (resume_from) {
            auto ck = Checkpoint<T>::load(*resume_from);
            ck.restore_into(net_, opt_);
            start_epoch = ck.next_epoch;
            best_acc = ck.best_accuracy;
        }

        TrainResult<T> result;
        result.best_checkpoint = output_dir / "best.ckpt";
        result.last_checkpoint = output_dir / "last.ckpt";
        MetricsWriter metrics(output_dir / "metrics.csv",
                              {{"config", cfg_.arch},
                               {"pair", pair_->config},
                               {"seed", std::to_string(cfg_.seed)},
                               {"lambda1", std::to_string(cfg_.lambda1)},
                               {"lambda2", std::to_string(cfg_.lambda2)},
                               {"lambda3", std::to_string(cfg_.lambda3)}},
                              /*append=*/start_epoch > 0);

        const auto decay_at = cfg_.decay_epochs_or_default();
        const int steps = steps_per_epoch();
        for (int epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            double lr = cfg_.lr;
            for (int d : decay_at)
                if (epoch >= d) lr *= cfg_.lr_decay_factor;
            opt_.set_learning_rate(lr);

            MetricsRow row;
            row.epoch = epoch;
            const AdaptationState st = cfg_.state_at(epoch);
            row.delta_e = st.delta_e;
            row.delta_c = st.delta_c;
            for (int s = 0; s < steps; ++s) {
                FrozenPerturbations<T> capture;
                LossBreakdown<T> bd;
                try {
                    bd = step(epoch, s, debug ? &capture : nullptr);
                } catch (const numerical_error& e) {
                    write_diagnostic(output_dir, epoch, s, e.what());
                    throw;
                }
                row.task += bd.task;
                row.fdta += bd.fdta;
                row.cdta += bd.cdta;
                row.entropy += bd.entropy;
                row.vat += bd.vat;
                row.total += bd.total;
                if (debug) {
                    if (capture.fdta_impact && capture.fdta_stoch && capture.fdta_adv)
                        debug->row(epoch, s, "channel", *capture.fdta_impact, *capture.fdta_stoch,
                                   *capture.fdta_adv,
                                   MaskBudget::channel(st.delta_c, capture.fdta_stoch->channels())
                                       .max_flips());
                    if (capture.cdta_impact && capture.cdta_stoch && capture.cdta_adv)
                        debug->row(epoch, s, "element", *capture.cdta_impact, *capture.cdta_stoch,
                                   *capture.cdta_adv,
                                   MaskBudget::element(st.delta_e, capture.cdta_stoch->length())
                                       .max_flips());
                }
            }
            row.task /= steps;
            row.fdta /= steps;
            row.cdta /= steps;
            row.entropy /= steps;
            row.vat /= steps;
            row.total /= steps;

            row.target_accuracy = evaluate_target();
            row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            metrics.append(row);
            result.history.push_back(row);

            if (row.target_accuracy >= best_acc) {
                best_acc = row.target_accuracy;
                Checkpoint<T>::of(net_, opt_, cfg_.seed, epoch + 1, best_acc).save(result.best_checkpoint);
            }
            Checkpoint<T>::of(net_, opt_, cfg_.seed, epoch + 1, best_acc).save(result.last_checkpoint);

            if (log)
                (*log) << "epoch " << epoch << " total " << row.total << " task " << row.task
                       << " acc " << row.target_accuracy << " (" << row.wall_seconds << "s)\n";
        }
        result.best_accuracy = best_acc;
        result.final_accuracy = result.history.empty() ? 0.0 : result.history.back().target_accuracy;
        return result;
    }

private:
    /// Post-mortem state dump next to the metrics on a numerical failure.
    void write_diagnostic(const std::filesystem::path& output_dir, int epoch, int step_index,
                          const char* what) const {
        std::ofstream out(output_dir / "diagnostic.txt", std::ios::trunc);
        if (!out) return;
        out << "numerical failure at epoch " << epoch << " step " << step_index << ": " << what
            << "\n";
        double norm2 = 0.0;
        std::int64_t nonfinite = 0;
        for (T v : net_.params()) {
            if (!std::isfinite(static_cast<double>(v))) ++nonfinite;
            norm2 += static_cast<double>(v) * static_cast<double>(v);
        }
        out << "param count " << net_.param_count() << ", l2 norm " << std::sqrt(norm2)
            << ", non-finite entries " << nonfinite << "\n";
        out << "learning rate " << opt_.learning_rate() << ", optimizer steps " << opt_.step_count()
            << "\n";
        const AdaptationState st = cfg_.state_at(epoch);
        out << "delta_e " << st.delta_e << ", delta_c " << st.delta_c << ", epsilon " << st.epsilon
            << ", rho_s " << st.rho_s << "\n";
    }

    DTAConfig cfg_;
    const DomainPair* pair_;
    Network<T> net_;
    Optimizer<T> opt_;
    DomainBatcher<T> batcher_;
};

}  // namespace dta
