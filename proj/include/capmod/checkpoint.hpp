#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capmod/config.hpp"
#include "capmod/errors.hpp"
#include "capmod/features_io.hpp"
#include "capmod/model.hpp"

namespace capmod {

// Model weights live in a binary container shaped like the feature files:
//   magic "LAMP" | version u32 | dtype u32 (4 or 8) | vocab hash u64 |
//   record count u32 | records.
// Each record: name length u32 | name bytes | ndims u32 | dims u64 each |
// row-major payload in the stored dtype.
// A JSON sidecar at <path>.json carries the resolved run config, the model
// dimensions, the vocabulary hash again and the epoch counter, so a
// checkpoint can be reopened without the original command line.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string attention_kind_name(AttentionKind k) {
    return k == AttentionKind::Spatial ? "spatial" : "region";
}

inline AttentionKind attention_kind_from(const std::string& s) {
    if (s == "spatial") return AttentionKind::Spatial;
    if (s == "region") return AttentionKind::Region;
    throw ConfigError("unknown attention kind '" + s + "'");
}

inline nlohmann::ordered_json dims_to_json(const ModelDims& m) {
    nlohmann::ordered_json j;
    j["vocab"] = m.vocab;
    j["emb"] = m.emb;
    j["d"] = m.d;
    j["h"] = m.h;
    j["a"] = m.a;
    j["d_v"] = m.d_v;
    j["d_b"] = m.d_b;
    j["attention"] = attention_kind_name(m.attention);
    return j;
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
    ModelDims m;
    m.vocab = j.at("vocab").get<std::size_t>();
    m.emb = j.at("emb").get<std::size_t>();
    m.d = j.at("d").get<std::size_t>();
    m.h = j.at("h").get<std::size_t>();
    m.a = j.at("a").get<std::size_t>();
    m.d_v = j.at("d_v").get<std::size_t>();
    m.d_b = j.at("d_b").get<std::size_t>();
    m.attention = attention_kind_from(j.at("attention").get<std::string>());
    return m;
}

template <typename Real>
struct Checkpoint {
    ModelParams<Real> params;
    RunConfig config;
    std::uint64_t vocab_hash = 0;
    std::size_t epochs_trained = 0;
};

namespace detail {

template <typename Real>
void put_real(std::string& out, Real v) {
    if constexpr (sizeof(Real) == 4) {
        put_f32(out, static_cast<float>(v));
    } else {
        double d = static_cast<double>(v);
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        put_u64(out, bits);
    }
}

template <typename Real>
Real read_real(ByteReader& r, const char* what) {
    if constexpr (sizeof(Real) == 4) {
        return static_cast<Real>(r.f32(what));
    } else {
        std::uint64_t bits = r.u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return static_cast<Real>(d);
    }
}

}  // namespace detail

inline std::string checkpoint_sidecar_path(const std::string& path) { return path + ".json"; }

template <typename Real>
void save_checkpoint(const ModelParams<Real>& params, const RunConfig& config,
                     std::uint64_t vocab_hash, std::size_t epochs_trained,
                     const std::string& path) {
    std::string out;
    out += "LAMP";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(sizeof(Real)));
    detail::put_u64(out, vocab_hash);
    auto named = params.named_parameters();
    detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64(out, t.dim(i));
        for (Real v : t.value()) detail::put_real(out, v);
    }
    detail::write_file_bytes(path, out);

    nlohmann::ordered_json side;
    side["format_version"] = kCheckpointVersion;
    side["dims"] = dims_to_json(params.dims);
    side["config"] = config.to_json();
    side["vocab_hash"] = std::to_string(vocab_hash);
    side["epochs_trained"] = epochs_trained;
    std::ofstream f(checkpoint_sidecar_path(path), std::ios::trunc);
    if (!f) throw IoError("cannot open " + checkpoint_sidecar_path(path) + " for writing");
    f << side.dump(2) << "\n";
    if (!f) throw IoError("short write to " + checkpoint_sidecar_path(path));
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
    const std::string side_path = checkpoint_sidecar_path(path);
    std::ifstream f(side_path);
    if (!f) throw IoError("cannot open " + side_path);
    nlohmann::json side;
    try {
        f >> side;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(side_path + ": " + e.what());
    }

    Checkpoint<Real> ck;
    try {
        if (side.at("format_version").get<std::uint32_t>() != kCheckpointVersion)
            throw IoError(side_path + ": unsupported format_version " +
                          side.at("format_version").dump());
        ck.config.apply_json(side.at("config"));
        ck.vocab_hash = std::stoull(side.at("vocab_hash").get<std::string>());
        ck.epochs_trained = side.at("epochs_trained").get<std::size_t>();
        ck.params = init_model<Real>(dims_from_json(side.at("dims")), 0);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(side_path + ": " + e.what());
    }

    std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r{buf, 0, path};
    r.need(4, "magic");
    if (buf.compare(0, 4, "LAMP") != 0)
        throw IoError(path + ": bad magic at byte offset 0 (expected LAMP)");
    r.pos = 4;
    std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported version " + std::to_string(version));
    std::uint32_t dtype = r.u32("dtype");
    if (dtype != sizeof(Real))
        throw IoError(path + ": stored dtype width " + std::to_string(dtype) +
                      " does not match requested width " + std::to_string(sizeof(Real)));
    std::uint64_t stored_hash = r.u64("vocab hash");
    if (stored_hash != ck.vocab_hash)
        throw IoError(path + ": vocabulary hash disagrees with sidecar (file pair mixed up?)");

    auto named = ck.params.named_parameters();
    std::uint32_t n_records = r.u32("record count");
    if (n_records != named.size())
        throw IoError(path + ": " + std::to_string(n_records) + " tensor records, expected " +
                      std::to_string(named.size()) +
                      " (checkpoint built for a different configuration)");
    for (auto& [name, t] : named) {
        std::uint32_t name_len = r.u32("record name length");
        r.need(name_len, "record name");
        std::string rec_name = buf.substr(r.pos, name_len);
        r.pos += name_len;
        if (rec_name != name)
            throw IoError(path + ": tensor record '" + rec_name + "' where '" + name +
                          "' was expected (checkpoint built for a different configuration)");
        std::uint32_t ndims = r.u32("record rank");
        if (ndims != t.rank())
            throw IoError(path + ": '" + name + "' has rank " + std::to_string(ndims) +
                          ", expected " + std::to_string(t.rank()));
        Shape shape;
        for (std::uint32_t i = 0; i < ndims; ++i)
            shape.push_back(static_cast<std::size_t>(r.u64("record dims")));
        if (shape != t.shape())
            throw IoError(path + ": '" + name + "' has shape " + shape_str(shape) +
                          ", expected " + shape_str(t.shape()));
        auto vals = t.value_mut();
        for (auto& v : vals) v = detail::read_real<Real>(r, "record payload");
    }
    if (r.pos != buf.size())
        throw IoError(path + ": " + std::to_string(buf.size() - r.pos) +
                      " trailing bytes after the last record");
    return ck;
}

// Guards for pairing a checkpoint with a dataset at load time.
template <typename Real>
void require_vocab_hash(const Checkpoint<Real>& ck, std::uint64_t dataset_hash) {
    if (ck.vocab_hash != dataset_hash)
        throw ConfigError("vocabulary hash mismatch: checkpoint was trained with a different "
                          "vocabulary than the one supplied");
}

template <typename Real>
void require_feature_widths(const Checkpoint<Real>& ck, std::size_t dv, std::size_t db) {
    const ModelDims& m = ck.params.dims;
    if (m.attention == AttentionKind::Spatial && m.d_v != dv)
        throw ConfigError("spatial feature width " + std::to_string(dv) +
                          " does not match checkpoint width " + std::to_string(m.d_v));
    if (m.attention == AttentionKind::Region && m.d_b != db)
        throw ConfigError("region feature width " + std::to_string(db) +
                          " does not match checkpoint width " + std::to_string(m.d_b));
}

}  // namespace capmod
