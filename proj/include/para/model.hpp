#pragma once

#include <optional>
#include <string>
#include <vector>

#include "para/adapter.hpp"
#include "para/matrix.hpp"

namespace para {

enum class Activation { linear, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct ModelLayer {
    std::string name;
    Matrix w0;
    std::optional<ConvShape> conv_shape;
};

// Stack of linear maps with an elementwise activation between layers (none
// after the last one). Stands in for the base model being personalized.
struct ToyModel {
    std::vector<ModelLayer> layers;
    Activation activation = Activation::linear;
};

// Checks consecutive shapes conform and every weight is finite.
void validate(const ToyModel& model);

// Base forward pass; x columns are independent samples.
Matrix forward(const ToyModel& model, const Matrix& x);

// Forward pass with per-layer weight overrides (same length as layers;
// an empty matrix means "use the base weight").
Matrix forward_with(const ToyModel& model, const std::vector<Matrix>& weights, const Matrix& x);

} // namespace para
