#include "sip/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sip {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  auto [it, inserted] = params_.emplace(name, std::move(init));
  if (!inserted)
    throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.find(name) != params_.end();
}

std::int64_t ParamStore::numel_total() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(numel_total()));
  for (const auto& [name, t] : params_)
    flat.insert(flat.end(), t.data(), t.data() + t.numel());
  return flat;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (static_cast<std::int64_t>(flat.size()) != numel_total())
    throw std::invalid_argument("ParamStore: flat vector has " +
                                std::to_string(flat.size()) + " entries, expected " +
                                std::to_string(numel_total()));
  std::size_t off = 0;
  for (auto& [name, t] : params_) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + static_cast<size_t>(t.numel())),
              t.data());
    off += static_cast<size_t>(t.numel());
  }
}

VarMap bind_leaves(Tape& tape, const ParamStore& params) {
  VarMap vars;
  for (const auto& [name, t] : params.items()) vars.emplace(name, tape.leaf(name, t));
  return vars;
}

VarMap bind_constants(Tape& tape, const ParamStore& params) {
  VarMap vars;
  for (const auto& [name, t] : params.items()) vars.emplace(name, tape.constant(t));
  return vars;
}

void Adam::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!g.same_shape(p))
      throw std::invalid_argument("Adam: gradient shape " + shape_str(g.shape()) +
                                  " does not match parameter '" + name + "' " +
                                  shape_str(p.shape()));
    Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    for (std::int64_t i = 0, n = p.numel(); i < n; ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      p[i] -= config_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
}

GradcheckReport gradcheck(const TapeFn& f, const ParamStore& params, double h,
                          std::int64_t max_coords_per_param) {
  if (h <= 0.0) throw std::invalid_argument("gradcheck: h must be positive");

  std::map<std::string, Tensor> tape_grads;
  {
    Tape tape;
    VarMap vars = bind_leaves(tape, params);
    Var loss = f(tape, vars);
    if (loss.value().numel() != 1)
      throw std::invalid_argument("gradcheck: objective must be scalar-valued");
    tape.backward(loss);
    tape_grads = tape.grad_map();
  }

  auto eval = [&f](const ParamStore& p) {
    Tape tape;
    VarMap vars = bind_leaves(tape, p);
    const double v = f(tape, vars).value().value();
    if (!std::isfinite(v))
      throw std::runtime_error("gradcheck: non-finite objective at perturbed parameters");
    return v;
  };

  GradcheckReport report;
  ParamStore work = params;
  for (const auto& [name, g] : tape_grads) {
    Tensor& x = work.at(name);
    const std::int64_t n = x.numel();
    if (max_coords_per_param == 0) continue;
    std::int64_t stride = 1;
    if (max_coords_per_param > 0 && max_coords_per_param < n)
      stride = (n + max_coords_per_param - 1) / max_coords_per_param;
    for (std::int64_t i = 0; i < n; i += stride) {
      const double x0 = x[i];
      const double step = h * std::max(1.0, std::abs(x0));
      x[i] = x0 + step;
      const double fp = eval(work);
      x[i] = x0 - step;
      const double fm = eval(work);
      x[i] = x0;
      const double fd = (fp - fm) / (2.0 * step);
      const double tg = g[i];
      const double rel =
          std::abs(fd - tg) / std::max({std::abs(fd), std::abs(tg), 1e-2});
      ++report.coords_checked;
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = i;
        report.tape_grad = tg;
        report.fd_grad = fd;
      }
    }
  }
  return report;
}

}  // namespace sip
