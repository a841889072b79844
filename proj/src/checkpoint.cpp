#include "lpsr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace lpsr {

namespace {

static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

constexpr char kMagic[8] = {'L', 'P', 'S', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated archive " + path.string());
    return v;
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

template <typename Scalar>
constexpr DType dtype_of() {
    return std::is_same_v<Scalar, float> ? DType::F32 : DType::F64;
}

}  // namespace

template <typename Scalar>
ArchiveEntry make_entry(const std::string& name, const Tensor<Scalar>& t) {
    ArchiveEntry e;
    e.name = name;
    e.dtype = dtype_of<Scalar>();
    e.shape = t.shape();
    e.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(Scalar));
    if (t.size() > 0) std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
    return e;
}

template <typename Scalar>
Tensor<Scalar> entry_tensor(const ArchiveEntry& e) {
    Tensor<Scalar> t(e.shape);
    const auto n = static_cast<std::size_t>(t.size());
    if (e.bytes.size() != n * dtype_size(e.dtype)) throw IoError("archive entry '" + e.name + "' has a bad size");
    if (e.dtype == dtype_of<Scalar>()) {
        if (n > 0) std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
    } else if (e.dtype == DType::F32) {
        std::vector<float> tmp(n);
        std::memcpy(tmp.data(), e.bytes.data(), e.bytes.size());
        for (std::size_t i = 0; i < n; ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(tmp[i]);
    } else {
        std::vector<double> tmp(n);
        std::memcpy(tmp.data(), e.bytes.data(), e.bytes.size());
        for (std::size_t i = 0; i < n; ++i) t[static_cast<Index>(i)] = static_cast<Scalar>(tmp[i]);
    }
    return t;
}

void write_archive(const std::filesystem::path& path, const std::vector<ArchiveEntry>& entries) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kArchiveVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const ArchiveEntry& e : entries) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (Index d : e.shape) put<std::int64_t>(out, static_cast<std::int64_t>(d));
        out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<ArchiveEntry> read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw IoError(path.string() + " is not a checkpoint archive");
    const auto version = get<std::uint32_t>(in, path);
    if (version != kArchiveVersion) throw IoError("unsupported archive version " + std::to_string(version));
    const auto count = get<std::uint32_t>(in, path);
    std::vector<ArchiveEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        e.name.resize(get<std::uint32_t>(in, path));
        if (!in.read(e.name.data(), static_cast<std::streamsize>(e.name.size())))
            throw IoError("truncated archive " + path.string());
        const auto dtype = get<std::uint8_t>(in, path);
        if (dtype > 1) throw IoError("unknown dtype " + std::to_string(dtype) + " in " + path.string());
        e.dtype = static_cast<DType>(dtype);
        const auto rank = get<std::uint32_t>(in, path);
        for (std::uint32_t r = 0; r < rank; ++r) {
            const auto d = get<std::int64_t>(in, path);
            if (d < 0) throw IoError("negative dimension in " + path.string());
            e.shape.push_back(static_cast<Index>(d));
        }
        e.bytes.resize(static_cast<std::size_t>(shape_size(e.shape)) * dtype_size(e.dtype));
        if (!in.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size())))
            throw IoError("truncated archive " + path.string());
        entries.push_back(std::move(e));
    }
    return entries;
}

std::filesystem::path sidecar_path(const std::filesystem::path& archive) {
    return std::filesystem::path(archive.string() + ".json");
}

void write_sidecar(const std::filesystem::path& archive, const nlohmann::json& meta) {
    std::ofstream out(sidecar_path(archive));
    if (!out) throw IoError("cannot write " + sidecar_path(archive).string());
    out << meta.dump(2) << '\n';
}

nlohmann::json read_sidecar(const std::filesystem::path& archive) {
    std::ifstream in(sidecar_path(archive));
    if (!in) throw IoError("cannot open " + sidecar_path(archive).string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed sidecar " + sidecar_path(archive).string() + ": " + e.what());
    }
}

template <typename Scalar>
void append_params(std::vector<ArchiveEntry>& out, const ParamSet<Scalar>& ps, const std::string& prefix) {
    for (const auto* p : ps.items()) out.push_back(make_entry(prefix + p->name, p->value));
}

template <typename Scalar>
void restore_params(const std::vector<ArchiveEntry>& entries, ParamSet<Scalar>& ps, const std::string& prefix) {
    std::map<std::string, const ArchiveEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (auto* p : ps.items()) {
        auto it = by_name.find(prefix + p->name);
        if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + prefix + p->name + "'");
        if (it->second->shape != p->value.shape())
            throw ShapeError("checkpoint tensor '" + prefix + p->name + "' has shape " +
                             shape_string(it->second->shape) + ", expected " + shape_string(p->value.shape()));
        p->value = entry_tensor<Scalar>(*it->second);
        p->zero_grad();
    }
}

template <typename Scalar>
void save_component(const std::filesystem::path& path, const ParamSet<Scalar>& ps, const std::string& component,
                    const nlohmann::json& config) {
    std::vector<ArchiveEntry> entries;
    append_params(entries, ps);
    write_archive(path, entries);
    write_sidecar(path, {{"component", component}, {"config", config}});
}

template <typename Scalar>
nlohmann::json load_component(const std::filesystem::path& path, ParamSet<Scalar>& ps, const std::string& component) {
    nlohmann::json meta = read_sidecar(path);
    if (meta.value("component", std::string()) != component)
        throw IoError(path.string() + " holds component '" + meta.value("component", std::string()) + "', expected '" +
                      component + "'");
    restore_params(read_archive(path), ps);
    return meta;
}

#define LPSR_INSTANTIATE_CHECKPOINT(S)                                                                        \
    template ArchiveEntry make_entry(const std::string&, const Tensor<S>&);                                   \
    template Tensor<S> entry_tensor<S>(const ArchiveEntry&);                                                  \
    template void append_params(std::vector<ArchiveEntry>&, const ParamSet<S>&, const std::string&);          \
    template void restore_params(const std::vector<ArchiveEntry>&, ParamSet<S>&, const std::string&);         \
    template void save_component(const std::filesystem::path&, const ParamSet<S>&, const std::string&,        \
                                 const nlohmann::json&);                                                      \
    template nlohmann::json load_component(const std::filesystem::path&, ParamSet<S>&, const std::string&);

LPSR_INSTANTIATE_CHECKPOINT(float)
LPSR_INSTANTIATE_CHECKPOINT(double)

}  // namespace lpsr
