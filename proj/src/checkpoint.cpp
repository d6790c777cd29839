#include "binary_io.hpp"
#include "hsprobe/error.hpp"
#include "hsprobe/probes.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstdio>

namespace hsprobe {

namespace {

constexpr std::string_view kMagic = "DRFT";

nlohmann::json config_json(const ProbeParams& p) {
    nlohmann::json j;
    j["architecture"] = std::string(to_string(p.arch));
    if (p.arch == Architecture::mlp) {
        j["mlp"] = {
            {"input_dim", p.mlp.input_dim},
            {"hidden_dim", p.mlp.hidden_dim},
            {"n_layers", p.mlp.n_layers},
        };
    } else {
        j["transformer"] = {
            {"input_dim", p.transformer.input_dim},
            {"model_dim", p.transformer.model_dim},
            {"n_layers", p.transformer.n_layers},
            {"n_heads", p.transformer.heads()},
            {"ff_dim", p.transformer.ff()},
            {"positional_encoding", p.transformer.positional_encoding},
        };
    }
    j["mode"] = std::string(to_string(p.mode));
    j["pooling"] = to_string(p.pooling);
    j["layer_index"] = p.layer_index;
    j["model_name"] = p.model_name;
    auto tensors = nlohmann::json::array();
    for (const auto& s : p.layout) {
        tensors.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    }
    j["tensors"] = std::move(tensors);
    if (p.pca) {
        j["pca"] = {{"dim", p.pca->dim()}, {"components", p.pca->count()}};
    } else {
        j["pca"] = nullptr;
    }
    return j;
}

}  // namespace

void save_checkpoint(const ProbeParams& params, const std::filesystem::path& path) {
    require(params.values.size() == parameter_count(params.layout), ErrorKind::shape_mismatch,
            "probe weights do not match their layout");
    const std::string config = config_json(params).dump();
    detail::ByteWriter w;
    w.reserve(12 + config.size() + 8 * params.values.size());
    w.raw(kMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(config.size()));
    w.raw(config);
    for (double v : params.values) {
        w.f64(v);
    }
    if (params.pca) {
        for (double v : params.pca->mean) {
            w.f64(v);
        }
        for (double v : params.pca->components.values()) {
            w.f64(v);
        }
        for (double v : params.pca->explained_variance) {
            w.f64(v);
        }
        w.f64(params.pca->total_variance);
    }
    detail::write_file(path, w.bytes());
}

ProbeParams load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    detail::ByteReader r(bytes, path.string());
    if (bytes.size() < kMagic.size() || r.raw(kMagic.size()) != kMagic) {
        fail(ErrorKind::bad_magic, path.string() + ": not a probe checkpoint (bad magic)");
    }
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        fail(ErrorKind::version_mismatch,
             path.string() + ": checkpoint version " + std::to_string(version) + " unsupported");
    }
    const auto config_len = r.u32();
    const auto config_text = r.raw(config_len);

    ProbeParams p;
    std::size_t pca_dim = 0;
    std::size_t pca_count = 0;
    std::vector<TensorSlot> declared;
    try {
        const auto j = nlohmann::json::parse(config_text);
        p.arch = parse_architecture(j.at("architecture").get<std::string>());
        if (p.arch == Architecture::mlp) {
            const auto& m = j.at("mlp");
            p.mlp.input_dim = m.at("input_dim").get<std::size_t>();
            p.mlp.hidden_dim = m.at("hidden_dim").get<std::size_t>();
            p.mlp.n_layers = m.at("n_layers").get<std::size_t>();
        } else {
            const auto& t = j.at("transformer");
            p.transformer.input_dim = t.at("input_dim").get<std::size_t>();
            p.transformer.model_dim = t.at("model_dim").get<std::size_t>();
            p.transformer.n_layers = t.at("n_layers").get<std::size_t>();
            p.transformer.n_heads = t.at("n_heads").get<std::size_t>();
            p.transformer.ff_dim = t.at("ff_dim").get<std::size_t>();
            p.transformer.positional_encoding = t.at("positional_encoding").get<bool>();
        }
        p.mode = parse_segment_mode(j.at("mode").get<std::string>());
        p.pooling = parse_pooling(j.at("pooling").get<std::string>());
        p.layer_index = j.at("layer_index").get<std::int64_t>();
        p.model_name = j.at("model_name").get<std::string>();
        std::size_t offset = 0;
        for (const auto& t : j.at("tensors")) {
            TensorSlot s{t.at("name").get<std::string>(), offset, t.at("rows").get<std::size_t>(),
                         t.at("cols").get<std::size_t>()};
            offset += s.size();
            declared.push_back(std::move(s));
        }
        if (!j.at("pca").is_null()) {
            pca_dim = j["pca"].at("dim").get<std::size_t>();
            pca_count = j["pca"].at("components").get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::corrupt, path.string() + ": malformed checkpoint config: " + e.what());
    } catch (const Error& e) {
        fail(ErrorKind::shape_mismatch, path.string() + ": invalid checkpoint config: " + e.what());
    }

    try {
        p.layout = p.arch == Architecture::mlp ? mlp_layout(p.mlp) : transformer_layout(p.transformer);
    } catch (const Error& e) {
        fail(ErrorKind::shape_mismatch, path.string() + ": " + e.what());
    }
    if (p.layout != declared) {
        fail(ErrorKind::shape_mismatch, path.string() + ": tensor shapes do not match the probe config");
    }
    if ((p.pooling.kind == PoolingKind::pca) != (pca_count > 0) ||
        (pca_count > 0 && (pca_count != p.pooling.pca_components || pca_count != p.mlp.input_dim))) {
        fail(ErrorKind::shape_mismatch, path.string() + ": PCA block does not match the pooling spec");
    }

    const std::size_t n_values = parameter_count(p.layout);
    const std::size_t pca_values = pca_count > 0 ? pca_dim + pca_count * pca_dim + pca_count + 1 : 0;
    if (r.remaining() != 8 * (n_values + pca_values)) {
        fail(r.remaining() < 8 * (n_values + pca_values) ? ErrorKind::truncated : ErrorKind::shape_mismatch,
             path.string() + ": weight payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                 std::to_string(8 * (n_values + pca_values)));
    }
    auto read_finite = [&](std::size_t count) {
        std::vector<double> out(count);
        for (auto& v : out) {
            v = r.f64();
            if (!std::isfinite(v)) {
                fail(ErrorKind::non_finite, path.string() + ": checkpoint contains non-finite weights");
            }
        }
        return out;
    };
    p.values = read_finite(n_values);
    if (pca_count > 0) {
        PCABasis basis;
        basis.mean = read_finite(pca_dim);
        basis.components = Matrix<double>(pca_count, pca_dim, read_finite(pca_count * pca_dim));
        basis.explained_variance = read_finite(pca_count);
        basis.total_variance = read_finite(1)[0];
        p.pca = std::move(basis);
    }
    return p;
}

std::string probe_fingerprint(const ProbeParams& params) {
    // FNV-1a over the config text and the raw weight bits.
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix = [&](std::uint64_t byte) {
        hash ^= byte;
        hash *= 0x100000001b3ULL;
    };
    for (char c : config_json(params).dump()) {
        mix(static_cast<unsigned char>(c));
    }
    for (double v : params.values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
            mix((bits >> (8 * i)) & 0xffu);
        }
    }
    char buf[24];
    std::snprintf(buf, sizeof buf, "drft1-%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

}  // namespace hsprobe
