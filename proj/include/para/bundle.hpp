#pragma once

#include <optional>
#include <string>
#include <vector>

#include "para/adapter.hpp"
#include "para/matrix.hpp"
#include "para/model.hpp"

namespace para {

enum class BundleKind { para, lora, base_model };

std::string to_string(BundleKind kind);
BundleKind bundle_kind_from_string(const std::string& s);

// One layer's worth of payload. Which matrices are meaningful depends on the
// bundle kind: para uses b (trained B, or the orthonormal Q once finalized),
// lora uses b_up/a_down, base_model uses w0.
struct BundleEntry {
    std::string layer_name;
    Matrix b;
    Matrix b_up;
    Matrix a_down;
    Matrix w0;
    std::optional<ConvShape> conv_shape;
    int r = 0;
    double gamma = 1.0;
    double alpha = 1.0;
    bool identity = false;  // para entry that reduces nothing (skip at apply)
    bool finalized = false; // b already holds the thin-QR Q
    // Cached at train time so apply/inspect don't need the base model:
    int base_rank = 0;  // numerical_rank of the layer's W0
    int layer_cols = 0; // k of the layer (param-count comparisons)
};

struct AdapterBundle {
    int format_version = 1;
    BundleKind kind = BundleKind::para;
    Activation activation = Activation::linear; // used by base_model bundles
    std::vector<BundleEntry> entries;
};

const BundleEntry* find_entry(const AdapterBundle& bundle, const std::string& layer_name);

// Container format: 8-byte magic "PARAFMT1", uint64-LE byte length of a
// UTF-8 JSON manifest, the manifest, then raw row-major little-endian
// float64 payloads in manifest order. Roundtrips bit-exactly.
void save_bundle(const AdapterBundle& bundle, const std::string& path);
AdapterBundle load_bundle(const std::string& path);

// Model <-> bundle plumbing.
AdapterBundle model_to_bundle(const ToyModel& model);
ToyModel bundle_to_model(const AdapterBundle& bundle);

// Applies a finalized para bundle: each named layer gets reduce_weight with
// the entry's Q (identity-flagged entries are skipped). Unmatched layers
// pass through untouched.
ToyModel apply_para_bundle(const ToyModel& model, const AdapterBundle& bundle);

} // namespace para
