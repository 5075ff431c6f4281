#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "wrapnet/train.hpp"

using namespace wrapnet;

TEST_CASE("synthetic dataset is deterministic and balanced") {
    auto a = make_synthetic_dataset(7, 1000);
    auto b = make_synthetic_dataset(7, 1000);
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    CHECK(a.train_idx == b.train_idx);
    CHECK(a.val_idx == b.val_idx);
    CHECK(a.test_idx == b.test_idx);

    auto c = make_synthetic_dataset(8, 1000);
    CHECK(a.x != c.x);           // noise depends on the seed
    CHECK(a.train_idx != c.train_idx);  // so does the split shuffle

    // classes are exactly balanced so chance accuracy is exactly 1/classes
    std::vector<int> counts(size_t(a.classes), 0);
    for (int y : a.y) counts[size_t(y)]++;
    for (int cls = 0; cls < a.classes; ++cls)
        CHECK(counts[size_t(cls)] == 1000 / a.classes);
    CHECK(a.chance() == doctest::Approx(0.25));

    // splits are stratified: each class appears equally often in each split
    for (const auto* idx : {&a.train_idx, &a.val_idx, &a.test_idx}) {
        std::vector<int> sc(size_t(a.classes), 0);
        for (size_t i : *idx) sc[size_t(a.y[i])]++;
        for (int cls = 1; cls < a.classes; ++cls) CHECK(sc[size_t(cls)] == sc[0]);
    }
    CHECK(a.train_idx.size() + a.val_idx.size() + a.test_idx.size() == 1000);
    CHECK(a.train_idx.size() == 700);
}

TEST_CASE("ste_quantize forward values and straight-through gradient") {
    QuantScheme s;
    s.step_size = 0.5;
    s.bits = 8;
    s.is_signed = true;
    s.kind = QuantKind::uniform;

    auto r = ste_quantize(1.3, s);
    CHECK(r.value == doctest::Approx(1.5));  // round(1.3/0.5)=3 -> 1.5
    CHECK(r.grad == doctest::Approx(1.0));

    // outside the clamp range the gradient is blocked
    auto hi = ste_quantize(1000.0, s);
    CHECK(hi.value == doctest::Approx(127 * 0.5));
    CHECK(hi.grad == doctest::Approx(0.0));
    auto lo = ste_quantize(-1000.0, s);
    CHECK(lo.value == doctest::Approx(-128 * 0.5));
    CHECK(lo.grad == doctest::Approx(0.0));

    QuantScheme u = s;
    u.is_signed = false;
    auto neg = ste_quantize(-3.0, u);
    CHECK(neg.value == doctest::Approx(0.0));
    CHECK(neg.grad == doctest::Approx(0.0));
}

TEST_CASE("metrics row is one-line JSON with the expected keys") {
    EpochMetrics m;
    m.stage = "finetune";
    m.epoch = 3;
    m.acc = 0.5;
    auto row = metrics_jsonl_row(m);
    CHECK(row.find('\n') == std::string::npos);
    CHECK(row.find("\"stage\"") != std::string::npos);
    CHECK(row.find("finetune") != std::string::npos);
    CHECK(row.find("\"epoch\"") != std::string::npos);
    CHECK(row.find("\"acc\"") != std::string::npos);
    CHECK(row.find("\"overflow_rate\"") != std::string::npos);
    CHECK(row.find("\"carry_std\"") != std::string::npos);
}

TEST_CASE("config validation rejects nonsense") {
    TrainConfig bad;
    bad.lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    TrainConfig bad2;
    bad2.weight_bits = 9;
    CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
    TrainConfig bad3;
    bad3.slope = 0.5;  // k must be >= 1
    CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);
    TrainConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("full-precision baseline learns the task") {
    auto data = make_synthetic_dataset(1, 2000);
    TrainConfig cfg;
    cfg.fp_baseline = true;
    cfg.seed = 1;
    cfg.epochs_pretrain = 60;
    auto r = train_pipeline(cfg, data);
    CHECK_FALSE(r.diverged);
    CHECK(r.final_test_acc >= 0.95);
}

TEST_CASE("label permutation control sits at chance") {
    auto data = make_synthetic_dataset(2, 2000);
    // destroy the signal: rotate every label by one class
    for (auto& y : data.y) y = (y + 1 + int(y) * 0) % data.classes;
    // rotation alone keeps structure; shuffle labels against inputs instead
    std::vector<int> ys = data.y;
    std::mt19937_64 rng(99);
    std::shuffle(ys.begin(), ys.end(), rng);
    data.y = ys;

    TrainConfig cfg;
    cfg.fp_baseline = true;
    cfg.seed = 2;
    cfg.epochs_pretrain = 25;
    auto r = train_pipeline(cfg, data);
    // nothing to learn: test accuracy stays near 1/classes
    CHECK(r.final_test_acc < data.chance() + 0.08);
}

TEST_CASE("training is bit-for-bit deterministic") {
    auto data = make_synthetic_dataset(3, 1500);
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.epochs_pretrain = 8;
    cfg.epochs_warmup = 3;
    cfg.epochs_finetune = 5;
    auto a = train_pipeline(cfg, data);
    auto b = train_pipeline(cfg, data);
    CHECK_FALSE(a.diverged);
    REQUIRE(a.model.layers.size() == b.model.layers.size());
    for (size_t i = 0; i < a.model.layers.size(); ++i) {
        CHECK(a.model.layers[i].weights.values ==
              b.model.layers[i].weights.values);
        CHECK(a.model.layers[i].input_scheme.step_size ==
              b.model.layers[i].input_scheme.step_size);
    }
    CHECK(a.final_val_acc == b.final_val_acc);
    CHECK(a.metrics.size() == b.metrics.size());
}

TEST_CASE("degenerate config trains: no regularizers, no cyclic, wide acc") {
    auto data = make_synthetic_dataset(4, 1500);
    TrainConfig cfg;
    cfg.seed = 4;
    cfg.acc_bits = 32;
    cfg.use_cyclic = false;
    cfg.p_target = 0.0;  // a 32-bit accumulator cannot hit a 5% overflow rate
    cfg.lambda_overflow = 0.0;
    cfg.lambda_carry = 0.0;
    cfg.epochs_pretrain = 25;
    cfg.epochs_warmup = 5;
    cfg.epochs_finetune = 15;
    auto r = train_pipeline(cfg, data);
    CHECK_FALSE(r.diverged);
    // a 32-bit accumulator never wraps on this task, so it should learn
    CHECK(r.final_test_acc >= 0.85);
    CHECK(r.final_overflow_rate == doctest::Approx(0.0));
}

TEST_CASE("quantized pipeline exports a runnable model") {
    auto data = make_synthetic_dataset(6, 2000);
    TrainConfig cfg;
    cfg.seed = 6;
    cfg.epochs_pretrain = 30;
    cfg.epochs_warmup = 8;
    cfg.epochs_finetune = 20;
    auto r = train_pipeline(cfg, data);
    CHECK_FALSE(r.diverged);
    CHECK(r.final_test_acc >= 0.85);

    // inference path agrees with the trainer's reported accuracy
    ForwardOptions wrapped;
    wrapped.mode = AccMode::wrapped_at(cfg.acc_bits);
    double acc = eval_accuracy(r.model, data, data.test_idx, wrapped);
    CHECK(acc == doctest::Approx(r.final_test_acc).epsilon(0.05));

    // packed inference matches wrapped inference exactly
    ForwardOptions packed;
    packed.mode = AccMode::packed(AccKind::packed_isolated, cfg.acc_bits, 64);
    CHECK(eval_accuracy(r.model, data, data.test_idx, packed) ==
          doctest::Approx(acc));

    // every quantized layer carries the cyclic activation at acc_bits
    for (const auto& l : r.model.layers)
        if (!l.full_precision && l.cyclic)
            CHECK(l.cyclic->bits == cfg.acc_bits);
}
