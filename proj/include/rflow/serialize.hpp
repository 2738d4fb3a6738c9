#pragma once

// Flat field files. Header: n, dims[n], period[n]; then node-ordered
// (row-major) components. Metrics store the upper triangle (g_00, g_01, ...,
// g_11, ...), vector fields store their n components. Binary mode writes
// int32 header integers and float64 values, little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "rflow/grid.hpp"

namespace rflow {

enum class FieldFormat { text, binary };

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw RejectedInput("serialize", "truncated field file");
  return to_little(v);
}

template <int Dim>
void write_header(std::ostream& os, const Grid<Dim>& grid, FieldFormat fmt) {
  if (fmt == FieldFormat::binary) {
    put<std::int32_t>(os, Dim);
    for (int a = 0; a < Dim; ++a) put<std::int32_t>(os, grid.dims()[a]);
    for (int a = 0; a < Dim; ++a) put<double>(os, grid.period()[a]);
  } else {
    os << Dim;
    for (int a = 0; a < Dim; ++a) os << ' ' << grid.dims()[a];
    for (int a = 0; a < Dim; ++a) os << ' ' << grid.period()[a];
    os << '\n';
  }
}

template <int Dim>
Grid<Dim> read_header(std::istream& is, FieldFormat fmt) {
  std::array<int, Dim> dims;
  std::array<double, Dim> period;
  int n = 0;
  if (fmt == FieldFormat::binary) {
    n = get<std::int32_t>(is);
    if (n != Dim) throw RejectedInput("serialize", "field dimension mismatch");
    for (int a = 0; a < Dim; ++a) dims[a] = get<std::int32_t>(is);
    for (int a = 0; a < Dim; ++a) period[a] = get<double>(is);
  } else {
    if (!(is >> n) || n != Dim) throw RejectedInput("serialize", "field dimension mismatch");
    for (int a = 0; a < Dim; ++a)
      if (!(is >> dims[a])) throw RejectedInput("serialize", "bad header");
    for (int a = 0; a < Dim; ++a)
      if (!(is >> period[a])) throw RejectedInput("serialize", "bad header");
  }
  return Grid<Dim>(dims, period);
}

inline void write_values(std::ostream& os, const std::vector<double>& v, FieldFormat fmt, int per_line) {
  if (fmt == FieldFormat::binary) {
    for (double x : v) put<double>(os, x);
    return;
  }
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << v[i] << ((i + 1) % per_line == 0 ? '\n' : ' ');
}

inline std::vector<double> read_values(std::istream& is, std::size_t count, FieldFormat fmt) {
  std::vector<double> v(count);
  for (auto& x : v) {
    if (fmt == FieldFormat::binary) {
      x = get<double>(is);
    } else if (!(is >> x)) {
      throw RejectedInput("serialize", "truncated field file");
    }
  }
  if (fmt == FieldFormat::binary && is.peek() != std::char_traits<char>::eof())
    throw RejectedInput("serialize", "trailing data after field values");
  return v;
}

}  // namespace detail

template <int Dim>
void write_metric(std::ostream& os, const GridModel<Dim>& m, FieldFormat fmt = FieldFormat::binary) {
  detail::write_header(os, m.grid, fmt);
  std::vector<double> v;
  v.reserve(m.size() * Dim * (Dim + 1) / 2);
  for (const auto& g : m.g)
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) v.push_back(g(i, j));
  detail::write_values(os, v, fmt, Dim * (Dim + 1) / 2);
}

template <int Dim>
GridModel<Dim> read_metric(std::istream& is, FieldFormat fmt = FieldFormat::binary) {
  GridModel<Dim> m{detail::read_header<Dim>(is, fmt), {}};
  const auto v = detail::read_values(is, m.grid.size() * Dim * (Dim + 1) / 2, fmt);
  m.g.resize(m.grid.size());
  std::size_t p = 0;
  for (auto& g : m.g)
    for (int i = 0; i < Dim; ++i)
      for (int j = i; j < Dim; ++j) {
        g(i, j) = v[p++];
        g(j, i) = g(i, j);
      }
  return m;
}

template <int Dim>
void write_vector_field(std::ostream& os, const Grid<Dim>& grid, const VectorField<Dim>& F,
                        FieldFormat fmt = FieldFormat::binary) {
  detail::write_header(os, grid, fmt);
  std::vector<double> v;
  v.reserve(F.size() * Dim);
  for (const auto& f : F)
    for (int i = 0; i < Dim; ++i) v.push_back(f(i));
  detail::write_values(os, v, fmt, Dim);
}

template <int Dim>
std::pair<Grid<Dim>, VectorField<Dim>> read_vector_field(std::istream& is, FieldFormat fmt = FieldFormat::binary) {
  Grid<Dim> grid = detail::read_header<Dim>(is, fmt);
  const auto v = detail::read_values(is, grid.size() * Dim, fmt);
  VectorField<Dim> F(grid.size());
  for (std::size_t x = 0; x < F.size(); ++x)
    for (int i = 0; i < Dim; ++i) F[x](i) = v[x * Dim + i];
  return {grid, F};
}

template <int Dim>
void save_metric(const std::string& path, const GridModel<Dim>& m, FieldFormat fmt = FieldFormat::binary) {
  std::ofstream os(path, fmt == FieldFormat::binary ? std::ios::binary : std::ios::out);
  if (!os) throw RejectedInput("serialize", "cannot open " + path);
  write_metric(os, m, fmt);
}

template <int Dim>
GridModel<Dim> load_metric(const std::string& path, FieldFormat fmt = FieldFormat::binary) {
  std::ifstream is(path, fmt == FieldFormat::binary ? std::ios::binary : std::ios::in);
  if (!is) throw RejectedInput("serialize", "cannot open " + path);
  return read_metric<Dim>(is, fmt);
}

}  // namespace rflow
