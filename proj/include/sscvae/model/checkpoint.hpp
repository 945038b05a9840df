#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "sscvae/model/bundle.hpp"

namespace sscvae::model {

// Binary checkpoint: magic, scalar width, parameter version, the architecture
// block (enough to rebuild the networks), a free-form config echo, then every
// component keyed by name with named, shaped parameter tensors. Everything is
// written little-endian via raw copies; the toolchains this builds on are all
// little-endian.
namespace ckpt_detail {

inline constexpr char kMagic[] = "SSCVAECKPT1\n";

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_str(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline std::string get_str(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ull << 32)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, NetworkBundle<T>& bundle,
                     const std::string& config_echo) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(d::kMagic, sizeof(d::kMagic) - 1);
  d::put<std::uint8_t>(os, sizeof(T));
  d::put<std::int32_t>(os, bundle.parameter_version);
  d::put_str(os, bundle.arch.to_kv().to_text());
  d::put_str(os, config_echo);
  auto comps = bundle.components();
  d::put<std::uint32_t>(os, static_cast<std::uint32_t>(comps.size()));
  for (auto [name, net] : comps) {
    d::put_str(os, name);
    auto params = net->params();
    d::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (auto* p : params) {
      d::put_str(os, p->name);
      d::put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.ndim()));
      for (int i = 0; i < p->value.ndim(); ++i)
        d::put<std::int32_t>(os, p->value.dim(i));
      os.write(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::streamsize>(sizeof(T) * p->value.numel()));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
struct Checkpoint {
  NetworkBundle<T> bundle;
  std::string config_echo;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[sizeof(d::kMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, d::kMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto scalar = d::get<std::uint8_t>(is);
  if (scalar != sizeof(T))
    throw std::runtime_error("checkpoint: scalar width " + std::to_string(scalar) +
                             " does not match this build");
  const auto version = d::get<std::int32_t>(is);
  const ArchConfig arch = ArchConfig::from_kv(KvText::parse(d::get_str(is)));
  Checkpoint<T> out{NetworkBundle<T>::build(arch, 0), d::get_str(is)};
  out.bundle.parameter_version = version;
  const auto n_comps = d::get<std::uint32_t>(is);
  auto comps = out.bundle.components();
  if (n_comps != comps.size())
    throw std::runtime_error("checkpoint: component count mismatch");
  for (std::uint32_t c = 0; c < n_comps; ++c) {
    const std::string name = d::get_str(is);
    auto* net = out.bundle.component(name);
    auto params = net->params();
    const auto n_params = d::get<std::uint32_t>(is);
    if (n_params != params.size())
      throw std::runtime_error("checkpoint: parameter count mismatch in " + name);
    for (std::uint32_t pi = 0; pi < n_params; ++pi) {
      const std::string pname = d::get_str(is);
      if (pname != params[pi]->name)
        throw std::runtime_error("checkpoint: expected parameter " +
                                 params[pi]->name + ", found " + pname);
      const auto ndim = d::get<std::uint32_t>(is);
      if (static_cast<int>(ndim) != params[pi]->value.ndim())
        throw std::runtime_error("checkpoint: rank mismatch for " + pname);
      for (std::uint32_t di = 0; di < ndim; ++di)
        if (d::get<std::int32_t>(is) != params[pi]->value.dim(static_cast<int>(di)))
          throw std::runtime_error("checkpoint: shape mismatch for " + pname);
      is.read(reinterpret_cast<char*>(params[pi]->value.data()),
              static_cast<std::streamsize>(sizeof(T) * params[pi]->value.numel()));
      if (!is) throw std::runtime_error("checkpoint: truncated tensor " + pname);
    }
  }
  return out;
}

}  // namespace sscvae::model
