#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chinet/data.hpp"
#include "chinet/eval.hpp"
#include "chinet/interpret.hpp"
#include "chinet/io.hpp"
#include "chinet/model.hpp"
#include "chinet/odt.hpp"
#include "chinet/report.hpp"
#include "chinet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace chinet;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

/// Bad flag combinations found after parsing.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    std::string run_name;
};

struct DataFlags {
    std::string prefix;
    std::string train_images, train_labels, test_images, test_labels;

    void add(CLI::App* app)
    {
        app->add_option("--data", prefix, "Dataset prefix: <prefix>-{train,test}-{images,labels}.idx");
        app->add_option("--train-images", train_images, "Training images (IDX, or raw RGB ending in .rgb)");
        app->add_option("--train-labels", train_labels, "Training labels");
        app->add_option("--test-images", test_images, "Test images (IDX, or raw RGB ending in .rgb)");
        app->add_option("--test-labels", test_labels, "Test labels");
    }

    std::optional<Dataset> load(const std::string& split) const
    {
        std::string images = split == "train" ? train_images : test_images;
        std::string labels = split == "train" ? train_labels : test_labels;
        if (images.empty() && !prefix.empty()) images = prefix + "-" + split + "-images.idx";
        if (labels.empty() && !prefix.empty()) labels = prefix + "-" + split + "-labels.idx";
        if (images.empty() && labels.empty()) return std::nullopt;
        if (images.empty() || labels.empty())
            throw UsageError("both images and labels are needed for the " + split + " split");
        for (const auto& p : {images, labels})
            if (!fs::exists(p)) throw FormatError("file not found: " + p);
        Dataset ds = fs::path(images).extension() == ".rgb"
                         ? load_raw_rgb(images, labels, read_rgb_meta(images + ".meta"))
                         : load_idx(images, labels);
        ds.split = split;
        return ds;
    }

    Dataset require(const std::string& split) const
    {
        auto ds = load(split);
        if (!ds) throw UsageError("no " + split + " split given (use --data or --" + split + "-images/--" + split + "-labels)");
        return std::move(*ds);
    }

    json describe() const
    {
        json j;
        if (!prefix.empty()) j["data"] = prefix;
        if (!train_images.empty()) j["train_images"] = train_images;
        if (!train_labels.empty()) j["train_labels"] = train_labels;
        if (!test_images.empty()) j["test_images"] = test_images;
        if (!test_labels.empty()) j["test_labels"] = test_labels;
        return j;
    }
};

std::string utc_stamp()
{
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return buf;
}

/// One run directory <out>/<command>/<name> with its manifest.
class Run {
public:
    Run(const std::string& command, const CommonFlags& flags) : command_(command), start_(std::chrono::steady_clock::now())
    {
        const fs::path base = fs::path(flags.out) / command;
        if (!flags.run_name.empty()) {
            dir_ = base / flags.run_name;
            if (fs::exists(dir_ / "manifest.json"))
                throw FormatError("run directory already holds a manifest: " + dir_.string());
        } else {
            const std::string stamp = utc_stamp();
            dir_ = base / stamp;
            for (int k = 2; fs::exists(dir_); ++k) dir_ = base / (stamp + "-" + std::to_string(k));
        }
        fs::create_directories(dir_);
        manifest_["command"] = command;
        manifest_["tool_version"] = kToolVersion;
        manifest_["started_utc"] = utc_stamp();
        manifest_["seed"] = nullptr;
        manifest_["config"] = json::object();
        manifest_["inputs"] = json::object();
        manifest_["outputs"] = json::array();
    }

    const fs::path& dir() const noexcept { return dir_; }
    json& manifest() noexcept { return manifest_; }

    fs::path output(const std::string& name)
    {
        manifest_["outputs"].push_back(name);
        return dir_ / name;
    }

    void finish()
    {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        manifest_["duration_seconds"] = secs;
        std::ofstream out(dir_ / "manifest.json");
        out << manifest_.dump(2) << "\n";
        std::cout << "run directory: " << dir_.string() << "\n";
    }

private:
    std::string command_;
    std::chrono::steady_clock::time_point start_;
    fs::path dir_;
    json manifest_;
};

Checkpoint load_model(const std::string& path)
{
    if (!fs::exists(path)) throw FormatError("file not found: " + path);
    return load_checkpoint(path);
}

void save_model(Run& run, const std::string& name, const Checkpoint& ck)
{
    save_checkpoint(run.output(name), ck);
    run.manifest()["outputs"].push_back(name + ".json");
}

void check_model_data(const ChiNet& net, const Dataset& ds)
{
    if (ds.input_dim() != net.input_dim())
        throw DimensionError("dataset has " + std::to_string(ds.input_dim()) + " features, model expects " +
                             std::to_string(net.input_dim()));
    if (ds.num_classes() > net.num_classes())
        throw DimensionError("dataset has labels beyond the model's " + std::to_string(net.num_classes()) + " classes");
}

/// The diagonalised network the interpretation commands work on: the checkpoint itself when it
/// already carries eigenvalues, else a full-rank ODT of it.
Checkpoint diagonalised(const Checkpoint& ck)
{
    if (!ck.eigenvalues.empty()) return ck;
    const OdtResult r = run_odt(ck.net);
    return {r.truncated, r.kept_eigenvalues()};
}

std::pair<std::size_t, std::size_t> image_shape(const std::string& flag, std::size_t dim, const Dataset* ds)
{
    if (!flag.empty()) {
        std::size_t h = 0, w = 0;
        char x = 0;
        std::istringstream in(flag);
        if (!(in >> h >> x >> w) || (x != 'x' && x != 'X') || h * w != dim)
            throw UsageError("--shape must be HxW with H*W = " + std::to_string(dim));
        return {h, w};
    }
    if (ds && ds->height * ds->width == dim) return {ds->height, ds->width};
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
    if (side * side == dim) return {side, side};
    return {1, dim};
}

void save_plot(Run& run, const std::string& name, const std::vector<PlotSeries>& series, const PlotOptions& opt)
{
    save_text(run.output(name), svg_line_plot(series, opt));
}

// ---------------------------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::size_t> epochs;
    bool baseline = false;
    DataFlags data;
};

void cmd_train(const TrainArgs& a, const CommonFlags& common)
{
    TrainConfig cfg;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw FormatError("file not found: " + a.config);
        parse_config(in, cfg);
    }
    for (const std::string& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (a.epochs) cfg.epochs = *a.epochs;
    if (common.seed) cfg.seed = *common.seed;
    cfg.validate();

    const Dataset train_set = a.data.require("train");
    const std::optional<Dataset> test_set = a.data.load("test");
    std::size_t classes = train_set.num_classes();
    if (test_set) classes = std::max(classes, test_set->num_classes());

    Run run("train", common);
    run.manifest()["seed"] = cfg.seed;
    for (const auto& [k, v] : cfg.entries()) run.manifest()["config"][k] = v;
    run.manifest()["inputs"] = a.data.describe();
    if (!a.config.empty()) run.manifest()["inputs"]["config"] = a.config;

    const ChiNet init = initial_chinet(train_set.input_dim(), classes, cfg);
    const ChiTrainResult r = train(init, train_set, cfg, test_set ? &*test_set : nullptr);
    const ChiNet net = symmetrise(r.net);
    save_model(run, "model.chin", Checkpoint{net, {}});

    {
        std::ofstream out(run.output("metrics.csv"));
        write_metrics_csv(out, r.metrics);
    }
    PlotSeries loss{"train loss", {}, {}}, acc{"test acc", {}, {}};
    for (const EpochMetrics& m : r.metrics) {
        loss.x.push_back(static_cast<double>(m.epoch));
        loss.y.push_back(m.train_loss);
        acc.x.push_back(static_cast<double>(m.epoch));
        acc.y.push_back(m.test_acc);
    }
    save_plot(run, "metrics.svg", {loss, acc}, {"training", "epoch", "value"});

    const Dataset& eval_set = test_set ? *test_set : train_set;
    const EvalResult ev = evaluate(net, eval_set);
    run.manifest()["result"] = {{"split", eval_set.split}, {"accuracy", ev.accuracy}, {"loss", ev.loss}};
    std::printf("%s accuracy %.6f loss %.6f\n", eval_set.split.c_str(), ev.accuracy, ev.loss);

    if (a.baseline) {
        const std::vector<std::size_t> hidden = cfg.hidden();
        const MlpTrainResult relu = train_relu_baseline(hidden, train_set, cfg, test_set ? &*test_set : nullptr);
        const std::vector<std::size_t> linear{cfg.width};
        const MlpTrainResult lin = train_relu_baseline(linear, train_set, cfg, test_set ? &*test_set : nullptr);
        {
            std::ofstream out(run.output("metrics_relu.csv"));
            write_metrics_csv(out, relu.metrics);
        }
        {
            std::ofstream out(run.output("metrics_linear.csv"));
            write_metrics_csv(out, lin.metrics);
        }
        const double ra = evaluate(relu.params, eval_set).accuracy, la = evaluate(lin.params, eval_set).accuracy;
        run.manifest()["result"]["relu_accuracy"] = ra;
        run.manifest()["result"]["linear_accuracy"] = la;
        std::printf("relu accuracy %.6f linear accuracy %.6f\n", ra, la);
    }
    run.finish();
}

// ---------------------------------------------------------------------------------------------

struct ModelArgs {
    std::string model;
    DataFlags data;
};

void cmd_eval(const ModelArgs& a, const CommonFlags& common)
{
    const Checkpoint ck = load_model(a.model);
    const Dataset ds = a.data.require("test");
    check_model_data(ck.net, ds);
    Run run("eval", common);
    run.manifest()["inputs"] = a.data.describe();
    run.manifest()["inputs"]["model"] = a.model;

    CsvTable preds([&] {
        std::vector<std::string> h{"index", "label", "predicted"};
        for (std::size_t c = 0; c < ck.net.num_classes(); ++c) h.push_back("logit" + std::to_string(c));
        return h;
    }());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Vector logits = forward(ck.net, ds.image(i));
        std::vector<std::string> row{std::to_string(i), std::to_string(ds.labels[i]), std::to_string(argmax(logits))};
        for (double v : logits) row.push_back(fmt_double(v));
        preds.add_row(std::move(row));
    }
    preds.save(run.output("predictions.csv"));

    const EvalResult ev = evaluate(ck.net, ds);
    run.manifest()["result"] = {{"accuracy", ev.accuracy}, {"loss", ev.loss}, {"samples", ds.size()}};
    std::printf("accuracy %.17g\nloss %.17g\n", ev.accuracy, ev.loss);
    run.finish();
}

// ---------------------------------------------------------------------------------------------

struct OdtArgs {
    std::string model;
    std::optional<double> epsilon;
    std::string ranks;
    std::string criterion = "singular-energy";
    DataFlags data;
};

std::vector<std::size_t> parse_ranks(const std::string& text)
{
    std::vector<std::size_t> out;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
            throw UsageError("--ranks expects comma-separated positive integers, got '" + text + "'");
        out.push_back(std::stoul(item));
    }
    return out;
}

json spectrum_json(const BondSpectrum& spectrum, const TruncationPlan& plan)
{
    json bonds = json::array();
    for (std::size_t b = 0; b < spectrum.size(); ++b) {
        const Vector& l = spectrum.bonds[b].values;
        json entry;
        entry["bond"] = b + 1;
        entry["dim"] = l.size();
        entry["rank"] = plan.ranks[b];
        entry["eigenvalues"] = l;
        entry["effective_dim"] = effective_dim(singular_from_eigen(l));
        bonds.push_back(entry);
    }
    return bonds;
}

void cmd_odt(const OdtArgs& a, const CommonFlags& common)
{
    if (a.epsilon.has_value() == !a.ranks.empty()) throw UsageError("give exactly one of --epsilon and --ranks");
    if (a.epsilon && !(*a.epsilon > 0.0)) throw UsageError("--epsilon must be positive");
    RankCriterion criterion;
    if (a.criterion == "singular-energy") criterion = RankCriterion::singular_energy;
    else if (a.criterion == "gram-frobenius") criterion = RankCriterion::gram_frobenius;
    else throw UsageError("--rank-criterion must be singular-energy or gram-frobenius");

    const Checkpoint ck = load_model(a.model);
    std::optional<Dataset> test = a.data.load("test");
    if (test) check_model_data(ck.net, *test);

    OdtResult r;
    if (a.epsilon) {
        r = run_odt(ck.net, *a.epsilon, criterion);
    } else {
        TruncationPlan plan{parse_ranks(a.ranks), std::nullopt};
        if (plan.ranks.size() != ck.net.depth() + 1)
            throw UsageError("--ranks needs " + std::to_string(ck.net.depth() + 1) + " values, one per bond");
        r = run_odt(ck.net);
        for (std::size_t b = 0; b < plan.ranks.size(); ++b)
            if (plan.ranks[b] < 1 || plan.ranks[b] > r.spectrum.bonds[b].values.size())
                throw UsageError("--ranks: bond " + std::to_string(b + 1) + " rank must be in [1, " +
                                 std::to_string(r.spectrum.bonds[b].values.size()) + "]");
        r.plan = plan;
        r.truncated = truncate(r.orth, r.spectrum, r.plan);
    }

    Run run("odt", common);
    run.manifest()["inputs"] = a.data.describe();
    run.manifest()["inputs"]["model"] = a.model;
    run.manifest()["config"] = {{"epsilon", a.epsilon ? json(*a.epsilon) : json(nullptr)},
                                {"ranks", a.ranks.empty() ? json(nullptr) : json(a.ranks)},
                                {"rank_criterion", a.criterion}};
    save_model(run, "model.chin", Checkpoint{r.truncated, r.kept_eigenvalues()});

    std::size_t total = 0, kept = 0;
    for (std::size_t b = 0; b < r.spectrum.size(); ++b) {
        total += r.spectrum.bonds[b].values.size();
        kept += r.plan.ranks[b];
    }
    json spec;
    spec["epsilon"] = a.epsilon ? json(*a.epsilon) : json(nullptr);
    spec["rank_criterion"] = a.criterion;
    spec["ranks"] = r.plan.ranks;
    spec["total_dims"] = total;
    spec["removed_frac"] = total ? 1.0 - static_cast<double>(kept) / static_cast<double>(total) : 0.0;
    spec["bonds"] = spectrum_json(r.spectrum, r.plan);
    if (test) {
        const EvalResult before = evaluate(ck.net, *test), after = evaluate(r.truncated, *test);
        spec["accuracy_before"] = before.accuracy;
        spec["accuracy_after"] = after.accuracy;
        spec["loss_before"] = before.loss;
        spec["loss_after"] = after.loss;
        std::printf("accuracy %.6f -> %.6f\n", before.accuracy, after.accuracy);
    }
    save_text(run.output("spectrum.json"), spec.dump(2) + "\n");
    std::printf("ranks");
    for (std::size_t v : r.plan.ranks) std::printf(" %zu", v);
    std::printf(" (removed %.4f of %zu dims)\n", spec["removed_frac"].get<double>(), total);
    run.finish();
}

// ---------------------------------------------------------------------------------------------

struct SweepArgs {
    std::string model;
    std::size_t points = 50;
    DataFlags data;
};

void cmd_sweep(const SweepArgs& a, const CommonFlags& common)
{
    if (a.points < 2) throw UsageError("--points must be at least 2");
    const Checkpoint ck = load_model(a.model);
    const Dataset test = a.data.require("test");
    check_model_data(ck.net, test);
    const OdtResult r = run_odt(ck.net);
    const std::vector<SweepRow> rows = truncation_sweep(r.orth, r.spectrum, test, a.points);

    Run run("sweep", common);
    run.manifest()["inputs"] = a.data.describe();
    run.manifest()["inputs"]["model"] = a.model;
    run.manifest()["config"] = {{"points", a.points}};

    CsvTable table({"removed_frac", "accuracy", "loss", "frobenius"});
    CsvTable plans([&] {
        std::vector<std::string> h{"removed", "removed_frac"};
        for (std::size_t b = 1; b <= r.spectrum.size(); ++b) h.push_back("rank" + std::to_string(b));
        return h;
    }());
    PlotSeries acc{"accuracy", {}, {}}, loss{"loss", {}, {}}, frob{"frobenius / initial", {}, {}};
    for (const SweepRow& row : rows) {
        const double v[] = {row.removed_frac, row.accuracy, row.loss, row.frobenius};
        table.add_row(v);
        std::vector<std::string> p{std::to_string(row.removed), fmt_double(row.removed_frac)};
        for (std::size_t k : row.ranks) p.push_back(std::to_string(k));
        plans.add_row(std::move(p));
        acc.x.push_back(row.removed_frac);
        acc.y.push_back(row.accuracy);
        loss.x.push_back(row.removed_frac);
        loss.y.push_back(row.loss);
        frob.x.push_back(row.removed_frac);
        frob.y.push_back(rows.front().frobenius > 0 ? row.frobenius / rows.front().frobenius : 0.0);
    }
    table.save(run.output("sweep.csv"));
    plans.save(run.output("sweep_ranks.csv"));
    save_plot(run, "sweep.svg", {acc, frob}, {"truncation sweep", "removed fraction", "value"});
    save_plot(run, "sweep_loss.svg", {loss}, {"truncation sweep", "removed fraction", "loss"});
    std::printf("%zu rows, baseline accuracy %.6f\n", rows.size(), rows.front().accuracy);
    run.finish();
}

// ---------------------------------------------------------------------------------------------

void cmd_compare_svd(const ModelArgs& a, const CommonFlags& common)
{
    const Checkpoint ck = load_model(a.model);
    const ChiNet net = ck.net.all_dense_symmetric() ? ck.net : symmetrise(ck.net);
    const OdtResult r = run_odt(net);
    const std::vector<Vector> svd = local_svd(net);

    Run run("compare-svd", common);
    run.manifest()["inputs"]["model"] = a.model;
    CsvTable odt_t({"bond", "index", "value"}), svd_t({"bond", "index", "value"}), eff({"bond", "odt", "svd"});
    std::vector<PlotSeries> series;
    for (std::size_t b = 0; b < r.spectrum.size(); ++b) {
        const Vector s = normalised(singular_from_eigen(r.spectrum.bonds[b].values));
        PlotSeries po{"odt bond " + std::to_string(b + 1), {}, {}}, ps{"svd bond " + std::to_string(b + 1), {}, {}};
        for (std::size_t j = 0; j < s.size(); ++j) {
            odt_t.add_row({std::to_string(b + 1), std::to_string(j), fmt_double(s[j])});
            po.x.push_back(static_cast<double>(j));
            po.y.push_back(s[j]);
        }
        for (std::size_t j = 0; j < svd[b].size(); ++j) {
            svd_t.add_row({std::to_string(b + 1), std::to_string(j), fmt_double(svd[b][j])});
            ps.x.push_back(static_cast<double>(j));
            ps.y.push_back(svd[b][j]);
        }
        const double eo = effective_dim(s), es = effective_dim(svd[b]);
        eff.add_row({std::to_string(b + 1), fmt_double(eo), fmt_double(es)});
        std::printf("bond %zu effective dim odt %.3f svd %.3f\n", b + 1, eo, es);
        series.push_back(std::move(po));
        series.push_back(std::move(ps));
    }
    odt_t.save(run.output("odt_spectra.csv"));
    svd_t.save(run.output("svd_spectra.csv"));
    eff.save(run.output("effective_dims.csv"));
    PlotOptions opt{"normalised singular values", "index", "value", true};
    save_plot(run, "spectra.svg", series, opt);
    run.finish();
}

// ---------------------------------------------------------------------------------------------

struct FeatureArgs {
    std::string model;
    std::string shape;
    std::size_t top = 0;
    DataFlags data;
};

/// Features whose |λ| clears the display threshold of their class.
std::vector<EigenFeature> displayed(const std::vector<EigenFeature>& fs, std::size_t top)
{
    double lmax = 0.0;
    for (const EigenFeature& f : fs) lmax = std::max(lmax, std::abs(f.eigenvalue));
    std::vector<EigenFeature> out;
    for (const EigenFeature& f : fs) {
        if (std::abs(f.eigenvalue) < kDisplayRelTol * lmax) continue;
        if (top && out.size() >= top) break;
        out.push_back(f);
    }
    return out;
}

void cmd_features(const FeatureArgs& a, const CommonFlags& common)
{
    const Checkpoint dck = diagonalised(load_model(a.model));
    const std::optional<Dataset> test = a.data.load("test");
    const auto [h, w] = image_shape(a.shape, dck.net.input_dim(), test ? &*test : nullptr);
    const auto feats = features(dck.net);

    Run run("features", common);
    run.manifest()["inputs"] = a.data.describe();
    run.manifest()["inputs"]["model"] = a.model;
    run.manifest()["config"] = {{"shape", std::to_string(h) + "x" + std::to_string(w)}, {"top", a.top}};
    const fs::path img_dir = run.dir() / "images";
    fs::create_directories(img_dir);
    run.manifest()["outputs"].push_back("images/");

    CsvTable table({"class", "rank", "eigenvalue", "image"});
    for (const auto& cls : feats)
        for (const EigenFeature& f : displayed(cls, a.top)) {
            const std::string stem = "class" + std::to_string(f.cls) + "_feature" + std::to_string(f.rank);
            save_signed_image(img_dir / stem, f.projection, h, w);
            table.add_row({std::to_string(f.cls), std::to_string(f.rank), fmt_double(f.eigenvalue), "images/" + stem + ".ppm"});
        }
    table.save(run.output("features.csv"));

    CsvTable atom_t({"rank", "row", "importance", "image"});
    const std::vector<Atom> at = atoms(dck.net, dck.eigenvalues.front());
    for (std::size_t k = 0; k < at.size(); ++k) {
        const std::string stem = "atom" + std::to_string(k);
        const std::span<const double> pixels(at[k].vector.data() + 1, at[k].vector.size() - 1);
        save_signed_image(img_dir / stem, pixels, h, w);
        atom_t.add_row({std::to_string(k), std::to_string(at[k].row), fmt_double(at[k].importance), "images/" + stem + ".ppm"});
    }
    atom_t.save(run.output("atoms.csv"));

    CsvTable cf({"core", "constant_fraction"});
    for (std::size_t l = 0; l < dck.net.depth(); ++l)
        cf.add_row({std::to_string(l + 1), fmt_double(constant_fraction(dck.net, l))});
    cf.save(run.output("constant_fraction.csv"));
    std::printf("%zu classes, %zu rows in features.csv\n", feats.size(), table.rows());
    run.finish();
}

// ---------------------------------------------------------------------------------------------

struct ExplainArgs {
    std::string model;
    std::size_t input = 0;
    std::size_t top = 8;
    std::string shape;
    std::string score = "squared";
    DataFlags data;
};

void cmd_explain(const ExplainArgs& a, const CommonFlags& common)
{
    ScoreMode mode;
    if (a.score == "squared") mode = ScoreMode::squared;
    else if (a.score == "linear") mode = ScoreMode::linear;
    else throw UsageError("--score must be squared or linear");
    const Checkpoint dck = diagonalised(load_model(a.model));
    const Dataset test = a.data.require("test");
    check_model_data(dck.net, test);
    if (a.input >= test.size())
        throw UsageError("--input " + std::to_string(a.input) + " out of range (test split has " +
                         std::to_string(test.size()) + " samples)");
    const auto [h, w] = image_shape(a.shape, dck.net.input_dim(), &test);
    const auto feats = features(dck.net);
    const Explanation ex = explain(dck.net, feats, test.image(a.input), mode);

    Run run("explain", common);
    run.manifest()["inputs"] = a.data.describe();
    run.manifest()["inputs"]["model"] = a.model;
    run.manifest()["config"] = {{"input", a.input}, {"top", a.top}, {"score", a.score}};
    const fs::path img_dir = run.dir() / "images";
    fs::create_directories(img_dir);
    run.manifest()["outputs"].push_back("images/");

    save_text(img_dir / "input.pgm", grey_pgm(test.image(a.input), h, w));
    image_table(test.image(a.input), h, w).save(img_dir / "input.csv");

    json rep;
    rep["input"] = a.input;
    rep["label"] = test.labels[a.input];
    rep["predicted"] = ex.predicted;
    rep["score"] = a.score;
    json classes = json::array();
    for (const ClassExplanation& ce : ex.classes) {
        json c;
        c["class"] = ce.cls;
        c["logit"] = ce.logit;
        c["score_sum"] = ce.score_sum;
        c["positive"] = ce.positive;
        c["negative"] = ce.negative;
        json top = json::array();
        for (std::size_t k = 0; k < std::min(a.top, ce.top.size()); ++k) {
            const ScoredFeature& sf = ce.top[k];
            json t{{"rank", sf.rank}, {"eigenvalue", sf.eigenvalue}, {"activation", sf.activation}, {"score", sf.score}};
            if (ce.cls == ex.predicted) {
                const std::string stem = "class" + std::to_string(ce.cls) + "_feature" + std::to_string(sf.rank);
                save_signed_image(img_dir / stem, feats[ce.cls][sf.rank].projection, h, w);
                t["image"] = "images/" + stem + ".ppm";
            }
            top.push_back(t);
        }
        c["top"] = top;
        classes.push_back(c);
    }
    rep["classes"] = classes;
    save_text(run.output("explain.json"), rep.dump(2) + "\n");
    std::printf("input %zu label %d predicted %zu\n", a.input, test.labels[a.input], ex.predicted);
    run.finish();
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"chinet: train, compress and interpret chi-nets"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    CommonFlags common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--seed", common.seed, "Random seed (recorded in the manifest)");
        sub->add_option("--out", common.out, "Output root")->capture_default_str();
        sub->add_option("--run-name", common.run_name, "Run directory name (default: UTC timestamp)");
    };

    TrainArgs train_a;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a chi-net and write a checkpoint");
    add_common(train_cmd);
    train_cmd->add_option("--config", train_a.config, "key = value config file");
    train_cmd->add_option("--set", train_a.overrides, "Config override key=value (repeatable)");
    train_cmd->add_option("--epochs", train_a.epochs, "Override the epoch count");
    train_cmd->add_flag("--baseline", train_a.baseline, "Also train the ReLU and linear baselines");
    train_a.data.add(train_cmd);

    ModelArgs eval_a;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Accuracy and mean loss of a checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--model", eval_a.model, "Checkpoint")->required();
    eval_a.data.add(eval_cmd);

    OdtArgs odt_a;
    CLI::App* odt_cmd = app.add_subcommand("odt", "Orthogonalise, diagonalise and truncate");
    add_common(odt_cmd);
    odt_cmd->add_option("--model", odt_a.model, "Checkpoint")->required();
    odt_cmd->add_option("--epsilon", odt_a.epsilon, "Relative Frobenius error budget");
    odt_cmd->add_option("--ranks", odt_a.ranks, "Explicit ranks r1,...,r{L+1}");
    odt_cmd->add_option("--rank-criterion", odt_a.criterion, "singular-energy or gram-frobenius")->capture_default_str();
    odt_a.data.add(odt_cmd);

    SweepArgs sweep_a;
    CLI::App* sweep_cmd = app.add_subcommand("sweep", "Accuracy, loss and norm while removing dimensions");
    add_common(sweep_cmd);
    sweep_cmd->add_option("--model", sweep_a.model, "Checkpoint")->required();
    sweep_cmd->add_option("--points", sweep_a.points, "Rows in the sweep")->capture_default_str();
    sweep_a.data.add(sweep_cmd);

    ModelArgs svd_a;
    CLI::App* svd_cmd = app.add_subcommand("compare-svd", "ODT spectra against local SVD of each core");
    add_common(svd_cmd);
    svd_cmd->add_option("--model", svd_a.model, "Checkpoint")->required();

    FeatureArgs feat_a;
    CLI::App* feat_cmd = app.add_subcommand("features", "Per-class eigenfeatures and atoms");
    add_common(feat_cmd);
    feat_cmd->add_option("--model", feat_a.model, "Checkpoint")->required();
    feat_cmd->add_option("--shape", feat_a.shape, "Image shape HxW");
    feat_cmd->add_option("--top", feat_a.top, "Images per class (0: all above the display threshold)");
    feat_a.data.add(feat_cmd);

    ExplainArgs expl_a;
    CLI::App* expl_cmd = app.add_subcommand("explain", "Per-feature logit contributions for one test image");
    add_common(expl_cmd);
    expl_cmd->add_option("--model", expl_a.model, "Checkpoint")->required();
    expl_cmd->add_option("--input", expl_a.input, "Index into the test split")->required();
    expl_cmd->add_option("--top", expl_a.top, "Features listed per class")->capture_default_str();
    expl_cmd->add_option("--shape", expl_a.shape, "Image shape HxW");
    expl_cmd->add_option("--score", expl_a.score, "squared or linear")->capture_default_str();
    expl_a.data.add(expl_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;
    }

    try {
        if (*train_cmd) cmd_train(train_a, common);
        else if (*eval_cmd) cmd_eval(eval_a, common);
        else if (*odt_cmd) cmd_odt(odt_a, common);
        else if (*sweep_cmd) cmd_sweep(sweep_a, common);
        else if (*svd_cmd) cmd_compare_svd(svd_a, common);
        else if (*feat_cmd) cmd_features(feat_a, common);
        else if (*expl_cmd) cmd_explain(expl_a, common);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "chinet: %s\n", e.what());
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "chinet: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "chinet: %s\n", e.what());
        return kExitData;
    }
    return 0;
}
