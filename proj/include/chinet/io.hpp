#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chinet/errors.hpp"
#include "chinet/linalg.hpp"
#include "chinet/model.hpp"

namespace chinet {

// Binary checkpoint layout (all integers and doubles little-endian):
//   "CHIN"  u32 version  u32 depth  u32 n_dims  u64 dims[n_dims]   (d_in+1, h_1 … h_{L+1}, classes)
//   u32 n_tensors, then per tensor:
//     u32 name_len  name  u8 rank  u64 dims[rank]  u8 flags (bit0 symmetric)  f64 payload[prod(dims)]
// Tensors: "embedding", "core<i>" (dense) or "core<i>.a"/"core<i>.b" (factored), "unembedding",
// and optionally "eigenvalues.bond<i>" for diagonalised models.

inline constexpr char kCheckpointMagic[4] = {'C', 'H', 'I', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ChiNet net;
    std::vector<Vector> eigenvalues;  // per bond, empty unless diagonalised

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const std::string& s) { bytes_ += s; }
    const std::string& bytes() const noexcept { return bytes_; }

    void tensor(const std::string& name, const std::vector<std::size_t>& dims, bool symmetric,
                std::span<const double> payload)
    {
        u32(static_cast<std::uint32_t>(name.size()));
        raw(name);
        u8(static_cast<std::uint8_t>(dims.size()));
        for (std::size_t d : dims) u64(d);
        u8(symmetric ? 1 : 0);
        for (double v : payload) f64(v);
    }

private:
    std::string bytes_;
};

class ByteReader {
public:
    ByteReader(std::vector<unsigned char> bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    std::uint8_t u8()
    {
        need(1);
        return bytes_[pos_++];
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_++]} << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n)
    {
        need(n);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const noexcept { return pos_ == bytes_.size(); }

    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n) fail("truncated checkpoint");
    }

    std::vector<unsigned char> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

struct RawTensor {
    std::string name;
    std::vector<std::size_t> dims;
    bool symmetric = false;
    std::vector<double> data;
};

inline constexpr std::size_t kMaxTensorEntries = std::size_t{1} << 31;

} // namespace detail

inline std::string serialise_checkpoint(const Checkpoint& ck)
{
    const ChiNet& net = ck.net;
    detail::ByteWriter w;
    w.raw(std::string(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(net.depth()));
    std::vector<std::size_t> dims{net.input_dim() + 1};
    for (std::size_t d : net.bond_dims()) dims.push_back(d);
    dims.push_back(net.num_classes());
    w.u32(static_cast<std::uint32_t>(dims.size()));
    for (std::size_t d : dims) w.u64(d);

    std::uint32_t count = 2 + static_cast<std::uint32_t>(ck.eigenvalues.size());
    for (const Core& c : net.cores()) count += std::holds_alternative<FactoredCore>(c) ? 2 : 1;
    w.u32(count);

    w.tensor("embedding", {net.embedding().rows(), net.embedding().cols()}, false, net.embedding().data());
    for (std::size_t i = 0; i < net.depth(); ++i) {
        const std::string name = "core" + std::to_string(i + 1);
        if (const auto* f = std::get_if<FactoredCore>(&net.core(i))) {
            w.tensor(name + ".a", {f->a.rows(), f->a.cols()}, false, f->a.data());
            w.tensor(name + ".b", {f->b.rows(), f->b.cols()}, false, f->b.data());
        } else {
            const Core3& d = std::get<Core3>(net.core(i));
            w.tensor(name, {d.out_dim(), d.in_dim(), d.in_dim()}, d.symmetric(), d.data());
        }
    }
    w.tensor("unembedding", {net.unembedding().rows(), net.unembedding().cols()}, false, net.unembedding().data());
    for (std::size_t b = 0; b < ck.eigenvalues.size(); ++b)
        w.tensor("eigenvalues.bond" + std::to_string(b + 1), {ck.eigenvalues[b].size()}, false, ck.eigenvalues[b]);
    return w.bytes();
}

inline Checkpoint parse_checkpoint(std::vector<unsigned char> bytes, const std::string& what = "checkpoint")
{
    detail::ByteReader r(std::move(bytes), what);
    if (r.raw(4) != std::string(kCheckpointMagic, 4)) r.fail("bad magic (not a chinet checkpoint)");
    if (const auto v = r.u32(); v != kCheckpointVersion) r.fail("unsupported version " + std::to_string(v));
    const std::size_t depth = r.u32();
    const std::size_t ndims = r.u32();
    if (ndims != depth + 3) r.fail("dimension table length does not match depth");
    std::vector<std::size_t> dims(ndims);
    for (auto& d : dims) d = r.u64();

    std::vector<detail::RawTensor> tensors(r.u32());
    for (auto& t : tensors) {
        t.name = r.raw(r.u32());
        t.dims.resize(r.u8());
        std::size_t n = 1;
        for (auto& d : t.dims) {
            d = r.u64();
            if (d != 0 && n > detail::kMaxTensorEntries / d) r.fail("tensor '" + t.name + "' is implausibly large");
            n *= d;
        }
        const auto flags = r.u8();
        if (flags > 1) r.fail("tensor '" + t.name + "' has unknown flags");
        t.symmetric = flags & 1;
        t.data.resize(n);
        for (double& v : t.data) v = r.f64();
    }
    if (!r.done()) r.fail("trailing bytes after last tensor");

    std::size_t next = 0;
    auto take = [&](const std::string& name, std::size_t rank) -> detail::RawTensor& {
        if (next >= tensors.size() || tensors[next].name != name)
            r.fail("expected tensor '" + name + "'");
        if (tensors[next].dims.size() != rank) r.fail("tensor '" + name + "' has wrong rank");
        return tensors[next++];
    };
    auto matrix = [&](const detail::RawTensor& t) {
        Matrix m(t.dims[0], t.dims[1]);
        std::copy(t.data.begin(), t.data.end(), m.data().begin());
        return m;
    };

    Matrix e = matrix(take("embedding", 2));
    std::vector<Core> cores;
    for (std::size_t i = 0; i < depth; ++i) {
        const std::string name = "core" + std::to_string(i + 1);
        if (next < tensors.size() && tensors[next].name == name) {
            const auto& t = take(name, 3);
            if (t.dims[1] != t.dims[2]) r.fail("core '" + name + "' is not square in its inputs");
            Core3 f(t.dims[0], t.dims[1]);
            std::copy(t.data.begin(), t.data.end(), f.data().begin());
            if (t.symmetric) {
                if (f.max_asymmetry() != 0.0) r.fail("core '" + name + "' is flagged symmetric but is not");
                f.set_symmetric_flag(true);
            }
            cores.emplace_back(std::move(f));
        } else {
            Matrix a = matrix(take(name + ".a", 2));
            Matrix b = matrix(take(name + ".b", 2));
            cores.emplace_back(FactoredCore{std::move(a), std::move(b)});
        }
    }
    Matrix u = matrix(take("unembedding", 2));
    Checkpoint ck;
    try {
        ck.net = ChiNet(std::move(e), std::move(cores), std::move(u));
    } catch (const DimensionError& err) {
        r.fail(err.what());
    }
    while (next < tensors.size()) {
        const auto& t = take("eigenvalues.bond" + std::to_string(ck.eigenvalues.size() + 1), 1);
        ck.eigenvalues.emplace_back(t.data.begin(), t.data.end());
    }
    if (!ck.eigenvalues.empty() && ck.eigenvalues.size() != depth + 1) r.fail("eigenvalues missing for some bonds");

    std::vector<std::size_t> actual{ck.net.input_dim() + 1};
    for (std::size_t d : ck.net.bond_dims()) actual.push_back(d);
    actual.push_back(ck.net.num_classes());
    if (actual != dims) r.fail("dimension table does not match tensors");
    for (std::size_t b = 0; b < ck.eigenvalues.size(); ++b)
        if (ck.eigenvalues[b].size() != ck.net.bond_dim(b + 1)) r.fail("eigenvalue count does not match bond dim");
    return ck;
}

/// JSON summary written next to every checkpoint as <path>.json.
inline nlohmann::ordered_json checkpoint_manifest(const Checkpoint& ck)
{
    const ChiNet& net = ck.net;
    nlohmann::ordered_json j;
    j["format"] = "CHIN";
    j["version"] = kCheckpointVersion;
    j["depth"] = net.depth();
    j["input_dim"] = net.input_dim();
    j["num_classes"] = net.num_classes();
    j["bond_dims"] = net.bond_dims();
    nlohmann::ordered_json cores = nlohmann::ordered_json::array();
    for (const Core& c : net.cores()) {
        if (std::holds_alternative<FactoredCore>(c)) cores.push_back("factored");
        else cores.push_back(std::get<Core3>(c).symmetric() ? "dense-symmetric" : "dense");
    }
    j["cores"] = cores;
    j["diagonalised"] = !ck.eigenvalues.empty();
    return j;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck)
{
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot write checkpoint: " + path.string());
        const std::string bytes = serialise_checkpoint(ck);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("failed writing checkpoint: " + path.string());
    }
    std::ofstream meta(path.string() + ".json");
    meta << checkpoint_manifest(ck).dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path.string());
    std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return parse_checkpoint(std::move(bytes), path.string());
}

} // namespace chinet
