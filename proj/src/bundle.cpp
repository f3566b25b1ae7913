#include "para/bundle.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "para/errors.hpp"
#include "para/linalg.hpp"

namespace para {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'A', 'R', 'A', 'F', 'M', 'T', '1'};

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
}

void put_f64_le(std::string& out, double d) {
    put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

double get_f64_le(const unsigned char* p) {
    return std::bit_cast<double>(get_u64_le(p));
}

// The tensor slots an entry can carry, in serialization order.
struct Slot {
    const char* key;
    Matrix BundleEntry::* member;
};
constexpr Slot kSlots[] = {
    {"b", &BundleEntry::b},
    {"b_up", &BundleEntry::b_up},
    {"a_down", &BundleEntry::a_down},
    {"w0", &BundleEntry::w0},
};

void check_unique_names(const AdapterBundle& bundle) {
    for (std::size_t i = 0; i < bundle.entries.size(); ++i) {
        for (std::size_t j = i + 1; j < bundle.entries.size(); ++j) {
            if (bundle.entries[i].layer_name == bundle.entries[j].layer_name) {
                throw InvariantViolation("bundle: duplicate layer name \"" +
                                         bundle.entries[i].layer_name + "\"");
            }
        }
    }
}

} // namespace

std::string to_string(BundleKind kind) {
    switch (kind) {
        case BundleKind::para: return "para";
        case BundleKind::lora: return "lora";
        case BundleKind::base_model: return "base_model";
    }
    throw Error("unknown bundle kind");
}

BundleKind bundle_kind_from_string(const std::string& s) {
    if (s == "para") return BundleKind::para;
    if (s == "lora") return BundleKind::lora;
    if (s == "base_model") return BundleKind::base_model;
    throw ParseError("unknown bundle kind \"" + s + "\"");
}

const BundleEntry* find_entry(const AdapterBundle& bundle, const std::string& layer_name) {
    for (const BundleEntry& e : bundle.entries) {
        if (e.layer_name == layer_name) return &e;
    }
    return nullptr;
}

void save_bundle(const AdapterBundle& bundle, const std::string& path) {
    if (bundle.format_version != 1) {
        throw UnsupportedVersion("save_bundle: only format_version 1 is writable");
    }
    check_unique_names(bundle);

    std::string payload;
    json entries = json::array();
    for (const BundleEntry& e : bundle.entries) {
        json je;
        je["layer_name"] = e.layer_name;
        je["r"] = e.r;
        je["gamma"] = e.gamma;
        je["alpha"] = e.alpha;
        je["identity"] = e.identity;
        je["finalized"] = e.finalized;
        je["base_rank"] = e.base_rank;
        je["layer_cols"] = e.layer_cols;
        if (e.conv_shape) {
            const ConvShape& cs = *e.conv_shape;
            je["conv_shape"] = {cs.c_out, cs.c_in, cs.h, cs.w};
        }
        json tensors = json::object();
        for (const Slot& slot : kSlots) {
            const Matrix& m = e.*slot.member;
            if (m.rows() == 0 && m.cols() == 0) continue; // default-empty slot
            json jt;
            jt["rows"] = m.rows();
            jt["cols"] = m.cols();
            jt["offset"] = payload.size();
            tensors[slot.key] = jt;
            for (int i = 0; i < m.rows(); ++i) {
                for (int j = 0; j < m.cols(); ++j) put_f64_le(payload, m(i, j));
            }
        }
        je["tensors"] = tensors;
        entries.push_back(je);
    }

    json manifest;
    manifest["format_version"] = bundle.format_version;
    manifest["kind"] = to_string(bundle.kind);
    manifest["activation"] = to_string(bundle.activation);
    manifest["entries"] = entries;
    const std::string text = manifest.dump();

    std::string out;
    out.append(kMagic, sizeof kMagic);
    put_u64_le(out, text.size());
    out += text;
    out += payload;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw Error("save_bundle: cannot write " + path);
}

AdapterBundle load_bundle(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("load_bundle: cannot open " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    const std::string raw = buf.str();
    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());

    if (raw.size() < sizeof kMagic + 8 ||
        raw.compare(0, sizeof kMagic, kMagic, sizeof kMagic) != 0) {
        throw BadMagic("load_bundle: " + path + " is not a PARAFMT1 bundle");
    }
    const std::uint64_t manifest_len = get_u64_le(bytes + sizeof kMagic);
    const std::size_t header = sizeof kMagic + 8;
    if (manifest_len > raw.size() - header) {
        throw ManifestMismatch("load_bundle: manifest length exceeds file size");
    }

    json manifest;
    try {
        manifest = json::parse(raw.substr(header, manifest_len));
    } catch (const json::exception& e) {
        throw ManifestMismatch(std::string("load_bundle: manifest is not valid JSON: ") + e.what());
    }

    const std::size_t payload_start = header + std::size_t(manifest_len);
    const std::size_t payload_size = raw.size() - payload_start;
    const unsigned char* payload = bytes + payload_start;

    AdapterBundle bundle;
    std::uint64_t declared_bytes = 0;
    try {
        bundle.format_version = manifest.at("format_version").get<int>();
        if (bundle.format_version != 1) {
            throw UnsupportedVersion("load_bundle: unsupported format_version " +
                                     std::to_string(bundle.format_version));
        }
        bundle.kind = bundle_kind_from_string(manifest.at("kind").get<std::string>());
        bundle.activation = activation_from_string(manifest.at("activation").get<std::string>());

        for (const json& je : manifest.at("entries")) {
            BundleEntry e;
            e.layer_name = je.at("layer_name").get<std::string>();
            e.r = je.at("r").get<int>();
            e.gamma = je.at("gamma").get<double>();
            e.alpha = je.at("alpha").get<double>();
            e.identity = je.at("identity").get<bool>();
            e.finalized = je.at("finalized").get<bool>();
            e.base_rank = je.at("base_rank").get<int>();
            e.layer_cols = je.at("layer_cols").get<int>();
            if (je.contains("conv_shape")) {
                const json& cs = je.at("conv_shape");
                e.conv_shape = ConvShape{cs.at(0).get<int>(), cs.at(1).get<int>(),
                                         cs.at(2).get<int>(), cs.at(3).get<int>()};
            }
            const json& tensors = je.at("tensors");
            for (const Slot& slot : kSlots) {
                if (!tensors.contains(slot.key)) continue;
                const json& jt = tensors.at(slot.key);
                const int rows = jt.at("rows").get<int>();
                const int cols = jt.at("cols").get<int>();
                const std::uint64_t offset = jt.at("offset").get<std::uint64_t>();
                if (rows < 0 || cols < 0) {
                    throw ManifestMismatch("load_bundle: negative tensor dimension");
                }
                const std::uint64_t nbytes = std::uint64_t(rows) * cols * 8;
                if (offset > payload_size || nbytes > payload_size - offset) {
                    throw ManifestMismatch("load_bundle: tensor \"" + std::string(slot.key) +
                                           "\" of " + e.layer_name + " overruns the payload");
                }
                declared_bytes += nbytes;
                Matrix m(rows, cols);
                const unsigned char* p = payload + offset;
                for (double& v : m.data()) {
                    v = get_f64_le(p);
                    p += 8;
                }
                e.*slot.member = m;
            }
            bundle.entries.push_back(e);
        }
    } catch (const json::exception& e) {
        throw ManifestMismatch(std::string("load_bundle: malformed manifest: ") + e.what());
    }

    if (declared_bytes != payload_size) {
        throw ManifestMismatch("load_bundle: manifest declares " + std::to_string(declared_bytes) +
                               " payload bytes, file carries " + std::to_string(payload_size));
    }
    check_unique_names(bundle);
    return bundle;
}

AdapterBundle model_to_bundle(const ToyModel& model) {
    validate(model);
    AdapterBundle bundle;
    bundle.kind = BundleKind::base_model;
    bundle.activation = model.activation;
    for (const ModelLayer& layer : model.layers) {
        BundleEntry e;
        e.layer_name = layer.name;
        e.w0 = layer.w0;
        e.conv_shape = layer.conv_shape;
        e.layer_cols = layer.w0.cols();
        bundle.entries.push_back(e);
    }
    return bundle;
}

ToyModel bundle_to_model(const AdapterBundle& bundle) {
    if (bundle.kind != BundleKind::base_model) {
        throw NonConforming("bundle_to_model: expected a base_model bundle");
    }
    ToyModel model;
    model.activation = bundle.activation;
    for (const BundleEntry& e : bundle.entries) {
        model.layers.push_back(ModelLayer{e.layer_name, e.w0, e.conv_shape});
    }
    validate(model);
    return model;
}

ToyModel apply_para_bundle(const ToyModel& model, const AdapterBundle& bundle) {
    validate(model);
    if (bundle.kind != BundleKind::para) {
        throw NonConforming("apply_para_bundle: expected a para bundle");
    }
    ToyModel out = model;
    for (ModelLayer& layer : out.layers) {
        const BundleEntry* e = find_entry(bundle, layer.name);
        if (e == nullptr || e->identity) continue;
        Matrix q;
        if (e->finalized) {
            q = e->b; // already the thin-QR factor
        } else {
            ParaAdapter adapter{e->layer_name, e->b, e->r, e->gamma, e->conv_shape};
            const int base_rank = e->base_rank > 0 ? e->base_rank : numerical_rank(layer.w0);
            try {
                q = derive_q_clamped(adapter, base_rank);
            } catch (const DegenerateColumns&) {
                continue; // untrained B: nothing to remove
            }
        }
        layer.w0 = reduce_weight(layer.w0, q);
    }
    return out;
}

} // namespace para
