#pragma once

// DeTurck vector field and the standard-form gauge term P_h.

#include "rflow/geometry.hpp"

namespace rflow {

/// V^k = g^pq (Gamma^k_pq(g) - Gamma^k_pq(h)).
template <int Dim>
VectorField<Dim> deturck_vector(const MetricData<Dim>& g, const MetricData<Dim>& h) {
  if (!(g.grid() == h.grid())) throw RejectedInput("gauge", "metric and background live on different grids");
  VectorField<Dim> V(g.size());
  for (std::size_t x = 0; x < g.size(); ++x)
    for (int k = 0; k < Dim; ++k) V[x](k) = (g.ginv[x].cwiseProduct(g.gamma[x][k] - h.gamma[x][k])).sum();
  return V;
}

template <int Dim>
VectorField<Dim> deturck_vector(const GridModel<Dim>& g, const GridModel<Dim>& h) {
  return deturck_vector(MetricData<Dim>(g), MetricData<Dim>(h));
}

/// P_h(g) = nabla_i V_j + nabla_j V_i with V the DeTurck field of (g, h).
template <int Dim>
SymTensorField<Dim> p_operator(const MetricData<Dim>& g, const MetricData<Dim>& h) {
  return lie_derivative_metric(g, deturck_vector(g, h));
}

template <int Dim>
SymTensorField<Dim> p_operator(const GridModel<Dim>& g, const GridModel<Dim>& h) {
  return p_operator(MetricData<Dim>(g), MetricData<Dim>(h));
}

}  // namespace rflow
