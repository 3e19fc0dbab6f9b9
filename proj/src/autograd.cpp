#include <limits>
#include "sunet/autograd.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "sunet/ops.hpp"

namespace sunet {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::replay_reverse() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)->propagate();
  clear();
}

void Tape::clear() {
  for (auto& n : nodes_) n->release();
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

template <typename T>
Var<T> ParameterList<T>::add(const std::string& name, Tensor<T> value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Var<T> v(std::move(value), true);
  index_[name] = params_.size();
  params_.push_back({name, v});
  return v;
}

template <typename T>
const Parameter<T>* ParameterList<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename T>
std::int64_t ParameterList<T>::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

template <typename T>
void ParameterList<T>::zero_grad() const {
  for (const auto& p : params_) {
    Var<T> v = p.var;
    v.zero_grad();
  }
}

template <typename T>
void backward(Tape& tape, const Var<T>& loss) {
  if (loss.value().size() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  loss.node().grad_buffer()[0] += T(1);
  tape.replay_reverse();
}

template <typename T>
std::map<std::string, Tensor<T>> gradients(Tape& tape, const Var<T>& loss,
                                           const ParameterList<T>& params) {
  params.zero_grad();
  backward(tape, loss);
  std::map<std::string, Tensor<T>> out;
  for (const auto& p : params.items()) out.emplace(p.name, p.var.grad());
  return out;
}

double grad_check_coordinates(const std::function<Var<double>()>& loss,
                              std::span<Var<double>> leaves,
                              std::span<const Coordinate> coords, double step) {
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Var<double> l = loss();
    backward(tape, l);
  }
  std::vector<Tensor<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  NoGradScope no_grad;
  // Central-difference round-off level; a coordinate whose analytic and numeric
  // derivatives both sit below it has a zero gradient and no meaningful ratio.
  const double noise = 10.0 * std::numeric_limits<double>::epsilon() *
                       std::max(1.0, std::abs(loss().value()[0])) / step;
  double worst = 0.0;
  for (const auto& c : coords) {
    auto& value = leaves[c.leaf].mutable_value();
    const double saved = value[c.index];
    value[c.index] = saved + step;
    const double plus = loss().value()[0];
    value[c.index] = saved - step;
    const double minus = loss().value()[0];
    value[c.index] = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    if (std::abs(numeric) < noise && std::abs(analytic[c.leaf][c.index]) < noise) continue;
    const double err =
        std::abs(analytic[c.leaf][c.index] - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check(const std::function<Var<double>(const std::vector<Var<double>>&)>& op,
                  const std::vector<Tensor<double>>& inputs, double step, std::uint64_t seed) {
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.emplace_back(t, true);

  // Fix the reduction weights from a probe evaluation.
  Var<double> probe = op(leaves);
  Var<double> weights;
  const bool scalar_out = probe.value().size() == 1;
  if (!scalar_out) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> w(static_cast<std::size_t>(probe.value().size()));
    for (auto& x : w) x = u(rng);
    weights = constant(Tensor<double>(probe.shape(), std::move(w)));
  }
  auto loss = [&]() {
    Var<double> out = op(leaves);
    return scalar_out ? reshape(out, Shape{}) : sum(mul(out, weights));
  };

  std::vector<Coordinate> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::int64_t i = 0; i < leaves[l].value().size(); ++i) coords.push_back({l, i});
  return grad_check_coordinates(loss, leaves, coords, step);
}

template class ParameterList<float>;
template class ParameterList<double>;
template void backward<float>(Tape&, const Var<float>&);
template void backward<double>(Tape&, const Var<double>&);
template std::map<std::string, Tensor<float>> gradients<float>(Tape&, const Var<float>&,
                                                               const ParameterList<float>&);
template std::map<std::string, Tensor<double>> gradients<double>(Tape&, const Var<double>&,
                                                                 const ParameterList<double>&);

}  // namespace sunet
