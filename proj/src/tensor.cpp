#include "lesa/tensor.hpp"

#include <cmath>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace lesa {

#ifdef __GLIBC__
namespace {
// keep large per-step buffers in the arena so they are not mmapped/unmapped
// (and re-faulted) on every training step
struct MallocTuning {
    MallocTuning() {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
    }
} g_malloc_tuning;
}  // namespace
#endif

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

TensorPtr tensor(Shape s, bool requires_grad) {
    return std::make_shared<Tensor>(std::move(s), requires_grad);
}

TensorPtr full(Shape s, double value, bool requires_grad) {
    auto t = tensor(std::move(s), requires_grad);
    for (auto& v : t->data) v = value;
    return t;
}

TensorPtr from_values(Shape s, std::vector<double> values, bool requires_grad) {
    if (numel_of(s) != static_cast<int64_t>(values.size())) {
        throw ShapeError("from_values: " + shape_str(s) + " needs " +
                         std::to_string(numel_of(s)) + " values, got " +
                         std::to_string(values.size()));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(s);
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr eye(int64_t n) {
    auto t = tensor({n, n});
    for (int64_t i = 0; i < n; ++i) t->data[static_cast<size_t>(i * n + i)] = 1.0;
    return t;
}

}  // namespace lesa
