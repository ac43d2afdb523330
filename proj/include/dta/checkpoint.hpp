#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dta/errors.hpp"
#include "dta/network.hpp"
#include "dta/optim.hpp"

namespace dta {

/// Checkpoint file, version 1. Layout: the magic "DTACKPT1\n", one text
/// metadata line
///   <arch> <C> <H> <W> <classes> <scalar f|d> <seed> <next_epoch>
///   <best_accuracy> <n_params> <n_buffers>
/// then raw little-endian parameter and buffer arrays, then the optimizer
/// state (its own text header plus raw moment arrays).
template <typename T>
struct Checkpoint {
    ArchitectureId arch;
    std::vector<T> params;
    std::vector<T> buffers;
    Optimizer<T> optimizer;
    std::uint64_t seed = 0;
    int next_epoch = 0;
    double best_accuracy = 0.0;

    static constexpr const char* kMagic = "DTACKPT1";

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write checkpoint " + path.string());
        out << kMagic << "\n";
        out << arch.name << ' ' << arch.input_shape[0] << ' ' << arch.input_shape[1] << ' '
            << arch.input_shape[2] << ' ' << arch.num_classes << ' '
            << (sizeof(T) == 4 ? 'f' : 'd') << ' ' << seed << ' ' << next_epoch << ' '
            << best_accuracy << ' ' << params.size() << ' ' << buffers.size() << '\n';
        write_vec(out, params);
        write_vec(out, buffers);
        optimizer.save(out);
        if (!out) throw io_error("short write on checkpoint " + path.string());
    }

    static Checkpoint load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw io_error("cannot open checkpoint " + path.string());
        std::string magic;
        std::getline(in, magic);
        if (magic != kMagic) throw io_error("not a checkpoint file: " + path.string());
        Checkpoint ck;
        char scalar = 0;
        std::size_t n_params = 0, n_buffers = 0;
        ck.arch.input_shape.resize(3);
        in >> ck.arch.name >> ck.arch.input_shape[0] >> ck.arch.input_shape[1] >>
            ck.arch.input_shape[2] >> ck.arch.num_classes >> scalar >> ck.seed >> ck.next_epoch >>
            ck.best_accuracy >> n_params >> n_buffers;
        in.ignore(1);
        if (scalar != (sizeof(T) == 4 ? 'f' : 'd'))
            throw io_error("checkpoint scalar width does not match this build: " + path.string());
        read_vec(in, ck.params, n_params);
        read_vec(in, ck.buffers, n_buffers);
        ck.optimizer.load(in);
        if (!in) throw io_error("truncated checkpoint " + path.string());
        return ck;
    }

    /// Captures the trainable state of a network.
    static Checkpoint of(const Network<T>& net, const Optimizer<T>& opt, std::uint64_t seed,
                         int next_epoch, double best_accuracy) {
        Checkpoint ck;
        ck.arch = net.arch();
        ck.params.assign(net.params().begin(), net.params().end());
        ck.buffers.assign(net.buffers().begin(), net.buffers().end());
        ck.optimizer = opt;
        ck.seed = seed;
        ck.next_epoch = next_epoch;
        ck.best_accuracy = best_accuracy;
        return ck;
    }

    void restore_into(Network<T>& net, Optimizer<T>& opt) const {
        if (net.arch().name != arch.name || net.param_count() != static_cast<std::int64_t>(params.size()))
            throw io_error("checkpoint does not match the network architecture");
        std::copy(params.begin(), params.end(), net.params().begin());
        std::copy(buffers.begin(), buffers.end(), net.buffers().begin());
        opt = optimizer;
    }

private:
    static void write_vec(std::ostream& os, const std::vector<T>& v) {
        if (!v.empty())
            os.write(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(T)));
    }
    static void read_vec(std::istream& is, std::vector<T>& v, std::size_t n) {
        v.assign(n, T(0));
        if (n) is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    }
};

}  // namespace dta
