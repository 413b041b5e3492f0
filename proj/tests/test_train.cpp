#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "chinet/train.hpp"
#include "oracles.hpp"

using namespace chinet;

namespace {

std::filesystem::path temp_dir()
{
    const auto dir = std::filesystem::temp_directory_path() / ("chinet_train_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    return dir;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Two Gaussian blobs at ±2 along a random direction; 2 classes.
Dataset blobs(std::size_t n, std::size_t d, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const Vector dir = oracle::random_vector(d, rng);
    const double nd = norm2(dir);
    std::normal_distribution<double> noise(0.0, 0.5);
    Dataset ds;
    ds.images = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        for (std::size_t k = 0; k < d; ++k) ds.images(i, k) = (label ? 2.0 : -2.0) * dir[k] / nd + noise(rng);
        ds.labels.push_back(label);
    }
    return ds;
}

std::vector<Matrix> flatten(ChiParams p)
{
    std::vector<Matrix> out;
    for (Matrix* m : p.tensors()) out.push_back(*m);
    return out;
}

} // namespace

TEST(Config, DefaultHyperparameters)
{
    const TrainConfig cfg = parse_config("");
    EXPECT_EQ(cfg.learning_rate, 1e-3);
    EXPECT_EQ(cfg.weight_decay, 1.0);
    EXPECT_EQ(cfg.batch_size, 2048u);
    EXPECT_EQ(cfg.epochs, 20u);
    EXPECT_EQ(cfg.noise_sigma, 0.3);
}

TEST(Config, ParsesKeysAndComments)
{
    const TrainConfig cfg = parse_config("# comment\nlearning_rate = 0.01\n  epochs=3 # trailing\n\nnoise_mode = l2\nseed = 42\n");
    EXPECT_EQ(cfg.learning_rate, 0.01);
    EXPECT_EQ(cfg.epochs, 3u);
    EXPECT_EQ(cfg.noise_mode, NoiseMode::expected_l2_norm);
    EXPECT_EQ(cfg.seed, 42u);
}

TEST(Config, UnknownKeyIsNamed)
{
    try {
        parse_config("learnin_rate = 0.1\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("learnin_rate"), std::string::npos);
    }
    EXPECT_THROW(parse_config("epochs = -1"), ConfigError);
    EXPECT_THROW(parse_config("epochs = 2.5"), ConfigError);
    EXPECT_THROW(parse_config("batch_size = 0"), ConfigError);
    EXPECT_THROW(parse_config("learning_rate = abc"), ConfigError);
    EXPECT_THROW(parse_config("just a line"), ConfigError);
    EXPECT_THROW(parse_config("bias_lane = maybe"), ConfigError);
    EXPECT_THROW(parse_config("bias_lane = true\nwidth = 1"), ConfigError);
}

TEST(Config, EntriesRoundTrip)
{
    TrainConfig cfg;
    cfg.learning_rate = 0.123;
    cfg.width = 7;
    cfg.noise_mode = NoiseMode::expected_l2_norm;
    cfg.bias_lane = false;
    cfg.bias_init = 2.5;
    std::string text;
    for (const auto& [k, v] : cfg.entries()) text += k + " = " + v + "\n";
    const TrainConfig back = parse_config(text);
    EXPECT_EQ(back.entries(), cfg.entries());
}

TEST(LoadIdx, HandDecodedBytes)
{
    const auto dir = temp_dir();
    write_bytes(dir / "img", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 128, 255, 64});
    write_bytes(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 1, 7});
    const Dataset ds = load_idx(dir / "img", dir / "lab");
    ASSERT_EQ(ds.size(), 1u);
    EXPECT_EQ(ds.height, 2u);
    EXPECT_EQ(ds.width, 2u);
    EXPECT_EQ(ds.images(0, 0), 0.0);
    EXPECT_NEAR(ds.images(0, 1), 0.50196, 1e-5);
    EXPECT_EQ(ds.images(0, 2), 1.0);
    EXPECT_NEAR(ds.images(0, 3), 0.25098, 1e-5);
    EXPECT_EQ(ds.labels[0], 7);
}

TEST(LoadIdx, EmptyAndErrors)
{
    const auto dir = temp_dir();
    write_bytes(dir / "img0", {0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2});
    write_bytes(dir / "lab0", {0, 0, 8, 1, 0, 0, 0, 0});
    EXPECT_EQ(load_idx(dir / "img0", dir / "lab0").size(), 0u);

    EXPECT_THROW(load_idx(dir / "img0", dir / "img0"), FormatError); // label file with image magic
    write_bytes(dir / "img1", {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2});
    write_bytes(dir / "lab1", {0, 0, 8, 1, 0, 0, 0, 1, 3});
    EXPECT_THROW(load_idx(dir / "img1", dir / "lab1"), FormatError); // truncated pixels
    EXPECT_THROW(load_idx(dir / "img0", dir / "lab1"), FormatError); // count mismatch
    EXPECT_THROW(load_idx(dir / "missing", dir / "lab1"), FormatError);
}

TEST(LoadIdx, WriteReadRoundTrip)
{
    const auto dir = temp_dir();
    Dataset ds;
    ds.height = 1;
    ds.width = 3;
    ds.images = Matrix::from_rows({{0.0, 1.0, 128.0 / 255.0}, {1.0, 0.0, 64.0 / 255.0}});
    ds.labels = {4, 9};
    write_idx(dir / "rt_img", dir / "rt_lab", ds);
    const Dataset back = load_idx(dir / "rt_img", dir / "rt_lab");
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.images, ds.images);
}

TEST(LoadRawRgb, LumaAndErrors)
{
    const auto dir = temp_dir();
    write_bytes(dir / "rgb", {255, 255, 255, 255, 0, 0});
    write_bytes(dir / "rgb_lab", {1});
    const Dataset ds = load_raw_rgb(dir / "rgb", dir / "rgb_lab", RawRgbMeta{1, 1, 2});
    EXPECT_NEAR(ds.images(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(ds.images(0, 1), 0.299, 1e-12);

    write_bytes(dir / "empty", {});
    EXPECT_EQ(load_raw_rgb(dir / "empty", dir / "empty", RawRgbMeta{0, 4, 4}).size(), 0u);
    EXPECT_THROW(load_raw_rgb(dir / "rgb", dir / "rgb_lab", RawRgbMeta{2, 1, 2}), FormatError);

    std::ofstream(dir / "meta") << "count=1\nheight=1\nwidth=2\n";
    const RawRgbMeta meta = read_rgb_meta(dir / "meta");
    EXPECT_EQ(meta.count, 1u);
    EXPECT_EQ(meta.width, 2u);
}

TEST(AddNoise, ZeroSigmaIsIdentity)
{
    std::mt19937_64 rng(1);
    Matrix m = oracle::random_matrix(3, 4, rng);
    const Matrix before = m;
    add_noise(m, 0.0, rng);
    EXPECT_EQ(m, before);
}

TEST(AddNoise, PerPixelStd)
{
    std::mt19937_64 rng(2);
    Matrix m(100000, 1);
    add_noise(m, 0.3, rng);
    double s2 = 0.0;
    for (double v : m.data()) s2 += v * v;
    const double sd = std::sqrt(s2 / 100000.0);
    EXPECT_GE(sd, 0.29);
    EXPECT_LE(sd, 0.31);
}

TEST(AddNoise, L2ModeAndDeterminism)
{
    std::mt19937_64 a(3), b(3);
    Matrix x(2000, 64), y(2000, 64);
    add_noise(x, 0.3, a, NoiseMode::expected_l2_norm);
    add_noise(y, 0.3, b, NoiseMode::expected_l2_norm);
    EXPECT_EQ(x, y);
    double s2 = 0.0;
    for (std::size_t n = 0; n < x.rows(); ++n) s2 += dot(x.row(n), x.row(n));
    EXPECT_NEAR(std::sqrt(s2 / 2000.0), 0.3, 0.01);
    EXPECT_THROW(add_noise(x, -1.0, a), ConfigError);
}

TEST(RmsNorm, Examples)
{
    NormState st;
    Matrix unit = Matrix::from_rows({{1.0, -1.0}, {1.0, 1.0}});
    EXPECT_DOUBLE_EQ(rms_norm_apply(unit, st, true), 1.0);
    EXPECT_EQ(unit, Matrix::from_rows({{1.0, -1.0}, {1.0, 1.0}}));

    NormState st4;
    Matrix big = Matrix::from_rows({{4.0, -4.0}, {4.0, 4.0}});
    EXPECT_DOUBLE_EQ(rms_norm_apply(big, st4, true), 4.0);
    for (std::size_t n = 0; n < 2; ++n) EXPECT_NEAR(norm2(big.row(n)) / std::sqrt(2.0), 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(st4.running, 4.0); // first update takes the statistic

    NormState stz;
    Matrix zero(3, 2);
    EXPECT_EQ(rms_norm_apply(zero, stz, true), 1.0);
    EXPECT_EQ(zero, Matrix(3, 2));
    EXPECT_FALSE(stz.initialised);
}

TEST(RmsNorm, RunningAverageAndEvalMode)
{
    NormState st{1.0, false, 0.1};
    Matrix a = Matrix::from_rows({{2.0, 2.0}});
    rms_norm_apply(a, st, true);
    Matrix b = Matrix::from_rows({{6.0, 6.0}});
    rms_norm_apply(b, st, true);
    EXPECT_NEAR(st.running, 0.9 * 2.0 + 0.1 * 6.0, 1e-15);
    Matrix c = Matrix::from_rows({{4.8, 0.0}});
    EXPECT_NEAR(rms_norm_apply(c, st, false), 2.4, 1e-15);
    EXPECT_NEAR(c(0, 0), 2.0, 1e-15);
    EXPECT_NEAR(st.running, 2.4, 1e-15); // eval leaves the state alone
}

TEST(FoldNorm, UnitScalarsLeaveNetUnchanged)
{
    std::mt19937_64 rng(4);
    std::vector<std::size_t> hidden{3, 4, 2};
    const ChiNet net = random_chinet(3, hidden, 2, rng);
    const ChiParams p = ChiParams::from_net(net);
    EXPECT_EQ(fold_norm(p, std::vector<NormState>(2)), net);
}

TEST(FoldNorm, SingleLayerHalvesUnembedding)
{
    std::mt19937_64 rng(5);
    std::vector<std::size_t> hidden{3, 4};
    const ChiParams p = ChiParams::from_net(random_chinet(2, hidden, 2, rng));
    std::vector<NormState> norms{NormState{2.0, true, 0.1}};
    const ChiNet folded = fold_norm(p, norms);
    Matrix half = p.u;
    half *= 0.5;
    EXPECT_EQ(folded.unembedding(), half);
    const Matrix x = oracle::random_matrix(5, 2, rng);
    const ChiCache c = chi_forward_batch(p, x, &norms, NormMode::eval);
    for (std::size_t n = 0; n < 5; ++n)
        EXPECT_LE(oracle::max_rel_dev(forward(folded, x.row(n)), Vector(c.logits.row(n).begin(), c.logits.row(n).end())),
                  1e-12);
}

TEST(FoldNorm, RandomNetMatchesEvalForward)
{
    std::mt19937_64 rng(6);
    std::vector<std::size_t> hidden{5, 6, 4, 3};
    const ChiParams p = ChiParams::from_net(random_chinet(4, hidden, 3, rng));
    std::vector<NormState> norms{NormState{0.3, true, 0.1}, NormState{2.5, true, 0.1}, NormState{7.0, true, 0.1}};
    const ChiNet folded = fold_norm(p, norms);
    const Matrix x = oracle::random_matrix(100, 4, rng);
    const ChiCache c = chi_forward_batch(p, x, &norms, NormMode::eval);
    for (std::size_t n = 0; n < 100; ++n) {
        const Vector ref(c.logits.row(n).begin(), c.logits.row(n).end());
        EXPECT_LE(oracle::max_rel_dev(forward(folded, x.row(n)), ref), 1e-10);
        EXPECT_EQ(argmax(forward(folded, x.row(n))), argmax(ref));
    }
}

TEST(SoftmaxXent, Examples)
{
    EXPECT_NEAR(softmax_xent(Vector{0.3, 0.3, 0.3, 0.3}, 2).loss, std::log(4.0), 1e-15);
    const XentResult big = softmax_xent(Vector{1000.0, 0.0}, 0);
    EXPECT_NEAR(big.loss, 0.0, 1e-300);
    EXPECT_TRUE(std::isfinite(big.grad[1]));
    EXPECT_THROW(softmax_xent(Vector{1.0}, 1), DimensionError);
}

TEST(SoftmaxXent, GradientMatchesFiniteDifferences)
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Vector z = oracle::random_vector(5, rng, 3.0);
        const XentResult r = softmax_xent(z, trial % 5);
        for (std::size_t k = 0; k < 5; ++k) {
            const double h = 1e-6;
            Vector up = z, down = z;
            up[k] += h;
            down[k] -= h;
            const double fd = (softmax_xent(up, trial % 5).loss - softmax_xent(down, trial % 5).loss) / (2 * h);
            EXPECT_LE(std::abs(fd - r.grad[k]), 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients)
{
    std::mt19937_64 rng(8);
    std::vector<std::size_t> hidden{3, 3, 3};
    const ChiParams p = ChiParams::from_net(random_chinet(2, hidden, 2, rng));
    const ChiCache c = chi_forward_batch(p, oracle::random_matrix(4, 2, rng), nullptr, NormMode::off);
    ChiParams g = chi_backward(p, c, Matrix(4, 2));
    for (Matrix* m : g.tensors()) EXPECT_EQ(max_abs(m->data()), 0.0);
}

TEST(Backward, OneLayerFiniteDifferences)
{
    std::mt19937_64 rng(9);
    std::vector<std::size_t> hidden{4, 3};
    const ChiParams p = ChiParams::from_net(random_chinet(3, hidden, 3, rng));
    const Matrix x = oracle::random_matrix(5, 3, rng);
    const std::vector<int> labels{0, 1, 2, 1, 0};
    const auto [loss, grad] = chi_loss_grad(p, x, labels);
    auto f = [&](const ChiParams& q) { return chi_loss_grad(q, x, labels).first; };
    EXPECT_LE(oracle::max_fd_rel_error(p, flatten(grad), f), 1e-5);
}

TEST(Backward, TwoLayerFiniteDifferences)
{
    std::mt19937_64 rng(10);
    std::vector<std::size_t> hidden{6, 6, 6};
    const ChiParams p = ChiParams::from_net(random_chinet(4, hidden, 3, rng));
    const Matrix x = oracle::random_matrix(8, 4, rng);
    const std::vector<int> labels{0, 1, 2, 1, 0, 2, 2, 1};
    const auto [loss, grad] = chi_loss_grad(p, x, labels);
    auto f = [&](const ChiParams& q) { return chi_loss_grad(q, x, labels).first; };
    EXPECT_LE(oracle::max_fd_rel_error(p, flatten(grad), f), 1e-5);
}

TEST(Backward, MlpFiniteDifferences)
{
    std::mt19937_64 rng(11);
    std::vector<std::size_t> hidden{5, 4, 4};
    MlpParams p = random_mlp(3, hidden, 3, rng);
    for (Matrix* b : {&p.b_in, &p.b[0], &p.b[1], &p.c})
        for (double& v : b->data()) v = 0.3; // keep pre-activations away from the ReLU kink
    const Matrix x = oracle::random_matrix(6, 3, rng);
    const std::vector<int> labels{0, 1, 2, 1, 0, 2};
    const MlpCache c = mlp_forward_batch(p, x, NormMode::off);
    const std::vector<Matrix> grad = mlp_backward(p, c, batch_xent(c.logits, labels).dlogits);
    auto f = [&](MlpParams q) { return batch_xent(mlp_forward_batch(q, x, NormMode::off).logits, labels).loss; };
    EXPECT_LE(oracle::max_fd_rel_error(p, grad, f), 1e-5);
}

TEST(Backward, BatchStatisticFiniteDifferences)
{
    std::mt19937_64 rng(12);
    std::vector<std::size_t> hidden{5, 4, 4};
    const ChiParams p = ChiParams::from_net(random_chinet(3, hidden, 3, rng));
    const Matrix x = oracle::random_matrix(7, 3, rng);
    const std::vector<int> labels{0, 1, 2, 1, 0, 2, 1};
    auto f = [&](const ChiParams& q) {
        std::vector<NormState> norms(q.depth());
        return chi_loss_grad(q, x, labels, &norms, NormMode::train).first;
    };
    std::vector<NormState> norms(p.depth());
    const auto [loss, grad] = chi_loss_grad(p, x, labels, &norms, NormMode::train);
    EXPECT_LE(oracle::max_fd_rel_error(p, flatten(grad), f), 1e-5);
}

TEST(Backward, MlpBatchStatisticFiniteDifferences)
{
    std::mt19937_64 rng(13);
    std::vector<std::size_t> hidden{5, 4, 4};
    MlpParams p = random_mlp(3, hidden, 3, rng);
    for (Matrix* b : {&p.b_in, &p.b[0], &p.b[1], &p.c})
        for (double& v : b->data()) v = 0.3;
    const Matrix x = oracle::random_matrix(6, 3, rng);
    const std::vector<int> labels{0, 1, 2, 1, 0, 2};
    auto fresh = [](MlpParams q) {
        for (NormState& n : q.norms) n = NormState{};
        return q;
    };
    MlpParams q0 = fresh(p);
    const MlpCache c = mlp_forward_batch(q0, x, NormMode::train);
    const std::vector<Matrix> grad = mlp_backward(q0, c, batch_xent(c.logits, labels).dlogits);
    auto f = [&](MlpParams q) {
        q = fresh(q);
        return batch_xent(mlp_forward_batch(q, x, NormMode::train).logits, labels).loss;
    };
    EXPECT_LE(oracle::max_fd_rel_error(p, grad, f), 1e-5);
}

TEST(RmsNorm, BackwardIsOrthogonalToOutput)
{
    // scale invariance: the gradient at y has no component along y
    std::mt19937_64 rng(14);
    Matrix y = oracle::random_matrix(6, 4, rng);
    Matrix z = y;
    NormState st;
    bool live = false;
    const double s = rms_norm_apply(z, st, true, &live);
    ASSERT_TRUE(live);
    Matrix dz = oracle::random_matrix(6, 4, rng);
    rms_norm_backward(dz, z, s, true);
    double along = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) along += dz.data()[k] * y.data()[k];
    EXPECT_NEAR(along, 0.0, 1e-12);
}

TEST(BiasLane, InitialNetCarriesConstantLane)
{
    TrainConfig cfg;
    cfg.depth = 2;
    cfg.width = 5;
    cfg.bias_init = 3.0;
    const ChiNet net = initial_chinet(4, 3, cfg);
    EXPECT_EQ(net, initial_chinet(4, 3, cfg));
    std::mt19937_64 rng(15);
    for (int t = 0; t < 5; ++t) {
        const auto lat = latents(net, oracle::random_vector(4, rng));
        for (const Vector& v : lat) EXPECT_EQ(v[0], 1.0);
    }
    const auto& f = std::get<FactoredCore>(net.core(0));
    EXPECT_EQ(f.a(2, 0), 3.0);
    EXPECT_EQ(f.b(4, 0), 3.0);
}

TEST(BiasLane, TrainingKeepsLaneConstant)
{
    const Dataset ds = blobs(80, 4, 16);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.depth = 2;
    cfg.width = 5;
    cfg.learning_rate = 1e-2;
    const ChiTrainResult r = train(initial_chinet(4, 2, cfg), ds, cfg);
    std::mt19937_64 rng(17);
    const double c0 = latents(r.net, oracle::random_vector(4, rng)).back()[0];
    for (int t = 0; t < 5; ++t) EXPECT_NEAR(latents(r.net, oracle::random_vector(4, rng)).back()[0], c0, 1e-12 * std::abs(c0));
}

TEST(AdamW, ZeroGradientZeroDecay)
{
    Matrix w = Matrix::from_rows({{1.0, -2.0}});
    std::vector<Matrix*> ps{&w};
    std::vector<Matrix> gs{Matrix(1, 2)};
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    AdamState st;
    for (int i = 0; i < 5; ++i) adamw_step(ps, gs, st, cfg, 0.1);
    EXPECT_EQ(w, Matrix::from_rows({{1.0, -2.0}}));
}

TEST(AdamW, DecoupledDecay)
{
    Matrix w = Matrix::from_rows({{1.0, -2.0}});
    std::vector<Matrix*> ps{&w};
    std::vector<Matrix> gs{Matrix(1, 2)};
    TrainConfig cfg;
    cfg.weight_decay = 1.0;
    AdamState st;
    adamw_step(ps, gs, st, cfg, 0.001);
    EXPECT_DOUBLE_EQ(w(0, 0), 0.999);
    EXPECT_DOUBLE_EQ(w(0, 1), -2.0 * 0.999);
}

TEST(AdamW, ConstantGradientGivesSignStep)
{
    Matrix w(1, 3);
    std::vector<Matrix*> ps{&w};
    std::vector<Matrix> gs{Matrix::from_rows({{5.0, -0.01, 300.0}})};
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    AdamState st;
    for (int i = 0; i < 100; ++i) {
        const Matrix before = w;
        adamw_step(ps, gs, st, cfg, 0.01);
        EXPECT_NEAR(w(0, 0) - before(0, 0), -0.01, 1e-8);
        EXPECT_NEAR(w(0, 1) - before(0, 1), 0.01, 1e-5);
        EXPECT_NEAR(w(0, 2) - before(0, 2), -0.01, 1e-8);
    }
}

TEST(CosineLr, Examples)
{
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.5), 0.5);
    EXPECT_NEAR(cosine_lr(100, 100, 0.5), 0.0, 1e-17);
    EXPECT_NEAR(cosine_lr(50, 100, 0.5), 0.25, 1e-16);
    EXPECT_THROW(cosine_lr(101, 100, 0.5), DimensionError);
}

TEST(Train, SeparableBlobsOneLayer)
{
    const Dataset ds = blobs(400, 6, 12);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;
    cfg.noise_sigma = 0.0;
    std::mt19937_64 rng(1);
    std::vector<std::size_t> hidden{8, 8};
    const ChiTrainResult r = train(random_chinet(6, hidden, 2, rng), ds, cfg);
    ASSERT_EQ(r.metrics.size(), 5u);
    EXPECT_GE(r.metrics.back().test_acc, 0.99);
    EXPECT_GE(evaluate(r.net, ds).accuracy, 0.99);
}

TEST(Train, ZeroLearningRateFreezes)
{
    const Dataset ds = blobs(100, 4, 13);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.0;
    cfg.depth = 1;
    cfg.width = 4;
    const ChiNet init = initial_chinet(4, 2, cfg);
    const ChiTrainResult r = train(init, ds, cfg);
    const ChiParams start = ChiParams::from_net(init);
    EXPECT_EQ(r.params.e, start.e);
    EXPECT_EQ(r.params.u, start.u);
    EXPECT_EQ(r.params.a, start.a);
}

TEST(Train, DeterministicMetricsAndNet)
{
    const Dataset ds = blobs(120, 5, 14);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.01;
    cfg.seed = 77;
    std::vector<std::size_t> hidden{5, 5, 5};
    std::mt19937_64 r1(3), r2(3);
    const ChiTrainResult a = train(random_chinet(5, hidden, 2, r1), ds, cfg, &ds);
    const ChiTrainResult b = train(random_chinet(5, hidden, 2, r2), ds, cfg, &ds);
    std::ostringstream sa, sb;
    write_metrics_csv(sa, a.metrics);
    write_metrics_csv(sb, b.metrics);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_EQ(a.net, b.net);
    EXPECT_EQ(sa.str().substr(0, 29), "epoch,train_loss,test_acc,lr\n");
}

TEST(Train, FoldedPredictionsEqualEvalMode)
{
    const Dataset ds = blobs(200, 5, 15);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 20;
    cfg.learning_rate = 0.01;
    std::vector<std::size_t> hidden{6, 6, 6};
    std::mt19937_64 rng(4);
    ChiTrainResult r = train(random_chinet(5, hidden, 2, rng), ds, cfg);
    const ChiCache c = chi_forward_batch(r.params, ds.images, &r.norms, NormMode::eval);
    const EvalResult folded = evaluate(r.net, ds);
    for (std::size_t n = 0; n < ds.size(); ++n) EXPECT_EQ(folded.predictions[n], argmax(c.logits.row(n)));
    // noise is train-only: evaluation is repeatable
    EXPECT_EQ(evaluate(r.net, ds).accuracy, folded.accuracy);
}

TEST(Train, Errors)
{
    TrainConfig cfg;
    std::mt19937_64 rng(5);
    std::vector<std::size_t> hidden{2, 2};
    EXPECT_THROW(train(random_chinet(3, hidden, 2, rng), Dataset{}, cfg), DimensionError);
    EXPECT_THROW(train(random_chinet(3, hidden, 2, rng), blobs(10, 4, 1), cfg), DimensionError);
}

TEST(ReluBaseline, SeparableBlobs)
{
    const Dataset ds = blobs(400, 6, 16);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.learning_rate = 0.01;
    cfg.weight_decay = 0.0;
    cfg.noise_sigma = 0.0;
    std::vector<std::size_t> hidden{8, 8};
    const MlpTrainResult r = train_relu_baseline(hidden, ds, cfg);
    EXPECT_GE(evaluate(r.params, ds).accuracy, 0.99);
    std::vector<std::size_t> linear{8};
    EXPECT_GE(evaluate(train_relu_baseline(linear, ds, cfg).params, ds).accuracy, 0.99);
}
