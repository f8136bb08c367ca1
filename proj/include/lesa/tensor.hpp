#pragma once

#include <memory>
#include <vector>

#include "lesa/common.hpp"

namespace lesa {

// Dense row-major tensor of 64-bit floats with an optional same-shape
// gradient buffer (empty vector == no gradient yet).
class Tensor {
public:
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;
    explicit Tensor(Shape s, bool rg = false)
        : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), 0.0), requires_grad(rg) {}

    int rank() const { return static_cast<int>(shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i < 0 ? rank() + i : i)]; }

    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) grad.assign(grad.size(), 0.0);
    }

    bool all_finite() const;
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr tensor(Shape s, bool requires_grad = false);
TensorPtr full(Shape s, double value, bool requires_grad = false);
TensorPtr from_values(Shape s, std::vector<double> values, bool requires_grad = false);

// identity matrix [n, n]
TensorPtr eye(int64_t n);

}  // namespace lesa
