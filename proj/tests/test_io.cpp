#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "chinet/io.hpp"
#include "chinet/odt.hpp"
#include "chinet/report.hpp"
#include "oracles.hpp"

using namespace chinet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / "chinet_test_io";
    fs::create_directories(dir);
    return dir / name;
}

std::vector<unsigned char> bytes_of(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ChiNet factored_net(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const std::vector<std::size_t> hidden{5, 4, 3};
    return random_chinet(3, hidden, 4, rng);
}

std::vector<unsigned char> serialised(const Checkpoint& ck)
{
    const std::string s = serialise_checkpoint(ck);
    return {s.begin(), s.end()};
}

} // namespace

TEST(Checkpoint, FactoredRoundTripIsExact)
{
    const Checkpoint ck{factored_net(1), {}};
    const Checkpoint back = parse_checkpoint(serialised(ck));
    EXPECT_EQ(back, ck);
}

TEST(Checkpoint, DenseSymmetricWithEigenvaluesRoundTrip)
{
    const OdtResult r = run_odt(factored_net(2));
    const Checkpoint ck{r.truncated, r.kept_eigenvalues()};
    const Checkpoint back = parse_checkpoint(serialised(ck));
    EXPECT_EQ(back, ck);
    EXPECT_TRUE(back.net.all_dense_symmetric());
    ASSERT_EQ(back.eigenvalues.size(), ck.net.depth() + 1);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical)
{
    std::mt19937_64 rng(3);
    const Checkpoint ck{oracle::random_dense_net(4, {6, 5}, 3, rng), {}};
    const fs::path a = scratch("a.chin"), b = scratch("b.chin");
    save_checkpoint(a, ck);
    save_checkpoint(b, load_checkpoint(a));
    EXPECT_EQ(bytes_of(a), bytes_of(b));
    EXPECT_EQ(bytes_of(fs::path(a.string() + ".json")), bytes_of(fs::path(b.string() + ".json")));
}

TEST(Checkpoint, HeaderLayout)
{
    const Checkpoint ck{factored_net(4), {}};
    const auto b = serialised(ck);
    ASSERT_GE(b.size(), 16u);
    EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "CHIN");
    EXPECT_EQ(b[4], 1);  // version, little-endian
    EXPECT_EQ(b[5] | b[6] | b[7], 0);
    EXPECT_EQ(b[8], 2);  // depth
    EXPECT_EQ(b[12], 5); // dims: d_in+1, three bonds, classes
}

TEST(Checkpoint, PayloadIsLittleEndianDouble)
{
    Matrix e(1, 2);
    e(0, 0) = 1.0;
    e(0, 1) = -2.5;
    const ChiNet net(e, {}, Matrix::identity(1));
    const auto b = serialised({net, {}});
    // magic, version, depth, ndims, 3 dims, ntensors, name len, "embedding", rank, 2 dims, flags
    const std::size_t off = 4 + 4 + 4 + 4 + 3 * 8 + 4 + 4 + 9 + 1 + 16 + 1;
    ASSERT_GT(b.size(), off + 16);
    const std::uint64_t one = std::bit_cast<std::uint64_t>(1.0);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(b[off + i], static_cast<unsigned char>(one >> (8 * i)));
}

TEST(Checkpoint, RejectsBadMagic)
{
    auto b = serialised({factored_net(5), {}});
    b[0] = 'X';
    EXPECT_THROW(parse_checkpoint(b), FormatError);
}

TEST(Checkpoint, RejectsUnknownVersion)
{
    auto b = serialised({factored_net(5), {}});
    b[4] = 9;
    try {
        parse_checkpoint(b);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(Checkpoint, RejectsTruncationAndTrailingBytes)
{
    auto b = serialised({factored_net(6), {}});
    auto shorter = b;
    shorter.resize(b.size() - 3);
    EXPECT_THROW(parse_checkpoint(shorter), FormatError);
    auto longer = b;
    longer.push_back(0);
    EXPECT_THROW(parse_checkpoint(longer), FormatError);
}

TEST(Checkpoint, RejectsFalseSymmetricFlag)
{
    Core3 f(2, 2);
    f(0, 0, 1) = 1.0;  // not symmetric
    std::vector<Core> cores{f};
    const ChiNet net(Matrix::identity(2), std::move(cores), Matrix::identity(2));
    auto b = serialised({net, {}});
    // flip the flags byte of the core tensor: the byte before its 8 payload doubles
    const std::size_t flag_pos = b.size() - (8 * 8) - (4 + 11 + 1 + 16 + 1 + 4 * 8) - 1;
    ASSERT_EQ(b[flag_pos], 0);
    b[flag_pos] = 1;
    EXPECT_THROW(parse_checkpoint(b), FormatError);
}

TEST(Checkpoint, MissingFileNamesPath)
{
    try {
        load_checkpoint("/nonexistent/model.chin");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/model.chin"), std::string::npos);
    }
}

TEST(Checkpoint, ManifestDescribesModel)
{
    const OdtResult r = run_odt(factored_net(7));
    const auto j = checkpoint_manifest({r.truncated, r.kept_eigenvalues()});
    EXPECT_EQ(j["format"], "CHIN");
    EXPECT_EQ(j["depth"], 2);
    EXPECT_EQ(j["bond_dims"].size(), 3u);
    EXPECT_EQ(j["cores"][0], "dense-symmetric");
    EXPECT_TRUE(j["diagonalised"].get<bool>());
}

TEST(Report, CsvHeaderAndRoundTripNumbers)
{
    CsvTable t({"a", "b"});
    const double row[] = {0.1, -1e-300};
    t.add_row(row);
    std::ostringstream out;
    t.write(out);
    std::istringstream in(out.str());
    std::string header, line;
    std::getline(in, header);
    std::getline(in, line);
    EXPECT_EQ(header, "a,b");
    const auto comma = line.find(',');
    EXPECT_EQ(std::stod(line.substr(0, comma)), 0.1);
    EXPECT_EQ(std::stod(line.substr(comma + 1)), -1e-300);
    EXPECT_THROW(t.add_row(std::vector<std::string>{"x"}), DimensionError);
}

TEST(Report, SvgContainsSeries)
{
    const std::string svg = svg_line_plot({{"acc", {0, 0.5, 1}, {1, 0.9, 0.1}}, {"loss", {0, 1}, {0, 2}}},
                                          {"sweep <test>", "removed", "value"});
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 5, true);
    EXPECT_NE(svg.find("sweep &lt;test&gt;"), std::string::npos);
    EXPECT_EQ(std::string::npos, svg.find("nan"));
    std::size_t lines = 0;
    for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
    EXPECT_EQ(lines, 2u);
}

TEST(Report, SvgLogAxisSkipsNonPositive)
{
    PlotOptions opt;
    opt.log_y = true;
    const std::string svg = svg_line_plot({{"s", {0, 1, 2}, {1, 0, 1e-3}}}, opt);
    EXPECT_EQ(std::string::npos, svg.find("nan"));
    EXPECT_EQ(std::string::npos, svg.find("inf"));
}

TEST(Report, DivergingPalette)
{
    EXPECT_EQ(diverging_colour(0.0), (std::array<unsigned char, 3>{255, 255, 255}));
    EXPECT_EQ(diverging_colour(1.0), (std::array<unsigned char, 3>{0, 0, 255}));
    EXPECT_EQ(diverging_colour(-1.0), (std::array<unsigned char, 3>{255, 0, 0}));
}

TEST(Report, PpmAndSidecar)
{
    const std::vector<double> v{-2.0, 0.0, 1.0, 2.0, 0.5, -0.5};
    const std::string ppm = diverging_ppm(v, 2, 3);
    const std::string head = "P6\n3 2\n255\n";
    ASSERT_EQ(ppm.size(), head.size() + 18);
    EXPECT_EQ(ppm.substr(0, head.size()), head);
    EXPECT_EQ(static_cast<unsigned char>(ppm[head.size()]), 255);      // -max → red
    EXPECT_EQ(static_cast<unsigned char>(ppm[head.size() + 1]), 0);
    EXPECT_EQ(static_cast<unsigned char>(ppm[head.size() + 9 + 2]), 255); // +max → blue
    EXPECT_THROW(diverging_ppm(v, 2, 2), DimensionError);

    const fs::path stem = scratch("img");
    save_signed_image(stem, v, 2, 3);
    std::ifstream csv(stem.string() + ".csv");
    std::string header, row;
    std::getline(csv, header);
    std::getline(csv, row);
    EXPECT_EQ(header, "c0,c1,c2");
    EXPECT_EQ(row, "-2,0,1");
    EXPECT_TRUE(fs::exists(stem.string() + ".ppm"));
}

TEST(Report, GreyPgmClamps)
{
    const std::vector<double> v{-1.0, 0.5, 2.0};
    const std::string pgm = grey_pgm(v, 1, 3);
    const std::string head = "P5\n3 1\n255\n";
    ASSERT_EQ(pgm.size(), head.size() + 3);
    EXPECT_EQ(static_cast<unsigned char>(pgm[head.size()]), 0);
    EXPECT_EQ(static_cast<unsigned char>(pgm[head.size() + 1]), 128);
    EXPECT_EQ(static_cast<unsigned char>(pgm[head.size() + 2]), 255);
}
