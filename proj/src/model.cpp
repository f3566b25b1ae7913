#include "para/model.hpp"

#include <cmath>
#include <set>

#include "para/errors.hpp"

namespace para {

std::string to_string(Activation a) {
    return a == Activation::linear ? "linear" : "tanh";
}

Activation activation_from_string(const std::string& s) {
    if (s == "linear") return Activation::linear;
    if (s == "tanh") return Activation::tanh;
    throw ParseError("unknown activation '" + s + "' (expected linear or tanh)");
}

void validate(const ToyModel& model) {
    if (model.layers.empty()) throw NonConforming("model has no layers");
    std::set<std::string> seen;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const ModelLayer& layer = model.layers[l];
        if (!seen.insert(layer.name).second) {
            throw NonConforming("duplicate layer name " + layer.name);
        }
        if (layer.w0.rows() < 1 || layer.w0.cols() < 1) {
            throw NonConforming("layer " + layer.name + " has an empty weight");
        }
        if (!layer.w0.all_finite()) {
            throw NonConforming("layer " + layer.name + " has non-finite weights");
        }
        if (l > 0 && layer.w0.cols() != model.layers[l - 1].w0.rows()) {
            throw NonConforming("layer " + layer.name + " expects " +
                                std::to_string(layer.w0.cols()) + " inputs but " +
                                model.layers[l - 1].name + " produces " +
                                std::to_string(model.layers[l - 1].w0.rows()));
        }
        if (layer.conv_shape &&
            layer.conv_shape->element_count() !=
                std::int64_t(layer.w0.rows()) * layer.w0.cols()) {
            throw NonConforming("layer " + layer.name + " conv shape disagrees with its weight");
        }
    }
}

Matrix forward(const ToyModel& model, const Matrix& x) {
    return forward_with(model, std::vector<Matrix>(model.layers.size()), x);
}

Matrix forward_with(const ToyModel& model, const std::vector<Matrix>& weights, const Matrix& x) {
    if (weights.size() != model.layers.size()) {
        throw NonConforming("expected one weight override slot per layer");
    }
    if (x.rows() != model.layers.front().w0.cols()) {
        throw NonConforming("input has " + std::to_string(x.rows()) + " rows, model expects " +
                            std::to_string(model.layers.front().w0.cols()));
    }
    Matrix a = x;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Matrix& w = weights[l].rows() > 0 ? weights[l] : model.layers[l].w0;
        a = w * a;
        if (l + 1 < model.layers.size() && model.activation == Activation::tanh) {
            for (int i = 0; i < a.rows(); ++i)
                for (int j = 0; j < a.cols(); ++j) a(i, j) = std::tanh(a(i, j));
        }
    }
    return a;
}

} // namespace para
