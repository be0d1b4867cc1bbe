#include "affmae/gradcheck.hpp"

#include <cmath>

namespace affmae {

namespace {

double eval(const std::vector<Tensor>& inputs,
            const std::function<int(Tape&, const std::vector<int>&)>& build) {
    Tape t(Precision::b64);
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor& x : inputs) ids.push_back(t.leaf(x));
    int root = build(t, ids);
    return t.value(root).get(0);
}

} // namespace

GradCheckResult grad_check(const std::vector<Tensor>& inputs,
                           const std::function<int(Tape&, const std::vector<int>&)>& build,
                           double step) {
    for (const Tensor& x : inputs)
        if (x.precision() != Precision::b64)
            throw ConfigError("grad_check: inputs must be b64");

    Tape t(Precision::b64);
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const Tensor& x : inputs) ids.push_back(t.leaf(x));
    int root = build(t, ids);
    if (t.value(root).numel() != 1) throw ConfigError("grad_check: build must return a scalar");
    t.backward(root);

    GradCheckResult res;
    std::vector<Tensor> work = inputs;
    for (size_t k = 0; k < inputs.size(); ++k) {
        if (!t.has_grad(ids[k])) continue; // input unused
        const Tensor& an = t.grad(ids[k]);
        for (int64_t i = 0; i < inputs[k].numel(); ++i) {
            double x0 = inputs[k].get(i);
            work[k].set(i, x0 + step);
            double fp = eval(work, build);
            work[k].set(i, x0 - step);
            double fm = eval(work, build);
            work[k].set(i, x0);
            double fd = (fp - fm) / (2.0 * step);
            double a = an.get(i);
            double denom = std::max({std::fabs(a), std::fabs(fd), 1e-3});
            double rel = std::fabs(a - fd) / denom;
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_input = int64_t(k);
                res.worst_elem = i;
            }
        }
    }
    return res;
}

} // namespace affmae
