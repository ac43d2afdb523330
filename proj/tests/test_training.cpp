#include <doctest.h>

#include "dta/train.hpp"
#include "fixtures.hpp"
#include "helpers.hpp"

using namespace dta;
namespace fs = std::filesystem;

namespace {

DTAConfig tiny_config() {
    DTAConfig cfg;
    cfg.arch = "tiny-test";
    cfg.lambda1 = 2.0;
    cfg.lambda2 = 0.01;
    cfg.lambda3 = 0.1;
    cfg.max_delta_e = 0.25;
    cfg.max_delta_c = 0.5;
    cfg.epsilon = 0.5;
    cfg.ramp_epochs = 2;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 3;
    return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("training");

TEST_CASE("a tiny network overfits one source batch with adaptation off") {
    auto pair = testing::synthetic_pair(32, 4, 4);
    DTAConfig cfg = tiny_config();
    cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
    cfg.rho_s = 0.0;
    cfg.lr = 3e-3;

    auto net = build_network<double>(default_arch("tiny-test"), cfg.seed);
    Optimizer<double> opt(OptimizerKind::adam, cfg.lr, net.param_count());
    DomainBatcher<double> batcher(pair, 32, cfg.seed, false, /*with_target=*/false);
    auto batch = batcher.batch(0, 0);

    double last = 0.0;
    for (int s = 0; s < 200; ++s) {
        Rng rng = cfg.step_rng(0, s);
        auto bd = train_step(net, opt, batch.source_x, batch.source_y, Tensor<double>(), cfg, 0, rng);
        last = bd.task;
    }
    CHECK(last < 0.05);
}

TEST_CASE("the loss breakdown invariant holds at every step") {
    auto pair = testing::synthetic_pair(24, 24, 8);
    DTAConfig cfg = tiny_config();
    Trainer<double> trainer(cfg, pair);
    for (int s = 0; s < 3; ++s) {
        auto bd = trainer.step(0, s);
        const double recomposed = bd.task + cfg.lambda1 * (bd.fdta + bd.cdta) +
                                  cfg.lambda2 * bd.entropy + cfg.lambda3 * bd.vat;
        CHECK(bd.total == doctest::Approx(recomposed).epsilon(1e-6));
        for (double v : {bd.task, bd.fdta, bd.cdta, bd.entropy, bd.vat}) CHECK(v >= -1e-8);
    }
}

TEST_CASE_TEMPLATE("identical configurations produce bitwise identical parameters", T, float,
                   double) {
    auto pair = testing::synthetic_pair(24, 24, 8);
    DTAConfig cfg = tiny_config();

    auto run_ten_steps = [&] {
        Trainer<T> trainer(cfg, pair);
        for (int s = 0; s < 10; ++s) trainer.step(0, s);
        return trainer.network().params();
    };
    auto a = run_ten_steps();
    auto b = run_ten_steps();
    CHECK(a == b);
}

TEST_CASE("an oracle network scores perfect accuracy and a fresh one is near chance") {
    // Memorizing oracle: overfit the (tiny) test set directly.
    DomainPair pair = testing::synthetic_pair(16, 8, 16);
    // Make the "train" images the test images so memorization transfers.
    pair.source_train = pair.target_test;
    DTAConfig cfg = tiny_config();
    cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
    cfg.rho_s = 0.0;
    cfg.lr = 3e-3;

    auto net = build_network<double>(default_arch("tiny-test"), 5);
    Optimizer<double> opt(OptimizerKind::adam, cfg.lr, net.param_count());
    DomainBatcher<double> batcher(pair, 16, cfg.seed, false, false);
    auto batch = batcher.batch(0, 0);
    for (int s = 0; s < 300; ++s) {
        Rng rng = cfg.step_rng(0, s);
        train_step(net, opt, batch.source_x, batch.source_y, Tensor<double>(), cfg, 0, rng);
    }
    CHECK(evaluate(net, pair) == doctest::Approx(1.0));

    // Untrained nets over a few seeds sit near chance on a 10-class set.
    auto wide = testing::synthetic_pair(10, 10, 400, 10, 12, 12, 17);
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        auto fresh = build_network<double>({"tiny-test", {1, 12, 12}, 10}, seed);
        const double acc = evaluate(fresh, wide);
        CHECK(acc >= 0.02);
        CHECK(acc <= 0.30);
    }
}

TEST_CASE("evaluation does not mutate the network") {
    auto pair = testing::synthetic_pair(8, 8, 8);
    auto net = build_network<double>(default_arch("tiny-test"), 5);
    auto params = net.params();
    auto buffers = net.buffers();
    evaluate(net, pair);
    CHECK(net.params() == params);
    CHECK(net.buffers() == buffers);
}

TEST_CASE("run_experiment writes metrics and checkpoints, and resume replays exactly") {
    auto pair = testing::synthetic_pair(24, 24, 12);
    DTAConfig cfg = tiny_config();
    cfg.epochs = 3;
    // Pin the decay schedule: the default derives from the epoch count,
    // which differs between the two legs below.
    cfg.lr_decay_epochs = {1, 2};

    fs::path dir_a = fs::temp_directory_path() / "dta_run_a";
    fs::path dir_b = fs::temp_directory_path() / "dta_run_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    Trainer<double> full(cfg, pair);
    auto full_result = full.run(dir_a);
    CHECK(full_result.history.size() == 3);
    CHECK(fs::exists(dir_a / "metrics.csv"));
    CHECK(fs::exists(dir_a / "best.ckpt"));
    CHECK(fs::exists(dir_a / "last.ckpt"));

    auto metrics = read_metrics(dir_a / "metrics.csv");
    REQUIRE(metrics.rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(metrics.rows[i].epoch == static_cast<int>(i));
        CHECK(metrics.rows[i].total ==
              doctest::Approx(full_result.history[i].total).epsilon(1e-9));
        CHECK(metrics.rows[i].target_accuracy ==
              doctest::Approx(full_result.history[i].target_accuracy));
    }

    // Stop after two epochs, then resume for the third.
    DTAConfig two = cfg;
    two.epochs = 2;
    Trainer<double> first_leg(two, pair);
    first_leg.run(dir_b);
    Trainer<double> second_leg(cfg, pair);
    auto resumed = second_leg.run(dir_b, dir_b / "last.ckpt");
    REQUIRE(resumed.history.size() == 1);
    CHECK(resumed.history[0].epoch == 2);
    CHECK(resumed.history[0].total == doctest::Approx(full_result.history[2].total).epsilon(1e-6));
    CHECK(resumed.history[0].target_accuracy ==
          doctest::Approx(full_result.history[2].target_accuracy).epsilon(1e-6));
    CHECK(second_leg.network().params() == full.network().params());
}

TEST_CASE("checkpoints round-trip through disk") {
    auto net = build_network<double>(default_arch("tiny-test"), 11);
    Optimizer<double> opt(OptimizerKind::adam, 1e-3, net.param_count());
    auto ck = Checkpoint<double>::of(net, opt, 11, 4, 0.75);
    fs::path path = fs::temp_directory_path() / "dta_ck_test.ckpt";
    ck.save(path);
    auto loaded = Checkpoint<double>::load(path);
    CHECK(loaded.arch.name == "tiny-test");
    CHECK(loaded.params == ck.params);
    CHECK(loaded.buffers == ck.buffers);
    CHECK(loaded.next_epoch == 4);
    CHECK(loaded.best_accuracy == doctest::Approx(0.75));
    CHECK(loaded.seed == 11);

    auto net2 = build_network<double>(default_arch("tiny-test"), 99);
    Optimizer<double> opt2(OptimizerKind::adam, 1e-3, net2.param_count());
    loaded.restore_into(net2, opt2);
    CHECK(net2.params() == net.params());
}

TEST_CASE("non-finite parameters abort the step with a numerical failure") {
    auto pair = testing::synthetic_pair(8, 8, 4);
    DTAConfig cfg = tiny_config();
    Trainer<double> trainer(cfg, pair);
    trainer.network().params()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(trainer.step(0, 0), numerical_error);

    SUBCASE("run() leaves a diagnostic dump before rethrowing") {
        fs::path dir = fs::temp_directory_path() / "dta_diag_run";
        fs::remove_all(dir);
        Trainer<double> doomed(cfg, pair);
        doomed.network().params()[3] = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(doomed.run(dir), numerical_error);
        REQUIRE(fs::exists(dir / "diagnostic.txt"));
        std::ifstream in(dir / "diagnostic.txt");
        std::string first;
        std::getline(in, first);
        CHECK(first.find("numerical failure") != std::string::npos);
    }
}

TEST_CASE("metrics files reject malformed input") {
    fs::path p = fs::temp_directory_path() / "dta_bad_metrics.csv";
    {
        std::ofstream out(p);
        out << "# meta=1\nnot,the,header\n";
    }
    CHECK_THROWS_AS(read_metrics(p), io_error);
}

TEST_SUITE_END();
