// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fedpisa/error.hpp"
#include "fedpisa/synth_data.hpp"

namespace fedpisa {

namespace wire {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(std::span<const std::uint8_t> buf,
                             std::size_t& off) {
  if (off + 8 > buf.size()) throw ProtocolError("wire: truncated message");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[off++]) << (8 * i);
  return v;
}

inline void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline std::int32_t get_i32(std::span<const std::uint8_t> buf,
                            std::size_t& off) {
  return static_cast<std::int32_t>(get_u32(buf, off));
}

inline void put_sized_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  put_matrix(out, m);
}

inline Matrix get_sized_matrix(std::span<const std::uint8_t> buf,
                               std::size_t& off) {
  const int rows = static_cast<int>(get_u32(buf, off));
  const int cols = static_cast<int>(get_u32(buf, off));
  return get_matrix(buf, off, rows, cols);
}

}  // namespace wire

inline void append_world_spec(std::vector<std::uint8_t>& out,
                              const WorldSpec& spec) {
  wire::put_i32(out, spec.num_clients);
  wire::put_i32(out, spec.num_style_clusters);
  wire::put_i32(out, spec.d_in);
  wire::put_i32(out, spec.d_out);
  wire::put_f64(out, spec.sigma_id);
  wire::put_f64(out, spec.sigma_style);
  wire::put_f64(out, spec.sigma_noise);
  wire::put_i32(out, spec.samples.neutral_train);
  wire::put_i32(out, spec.samples.neutral_val);
  wire::put_i32(out, spec.samples.neutral_test);
  wire::put_i32(out, spec.samples.expressive_train);
  wire::put_i32(out, spec.samples.expressive_val);
  wire::put_i32(out, spec.samples.expressive_test);
  wire::put_u64(out, spec.seed);
}

inline WorldSpec read_world_spec(std::span<const std::uint8_t> buf,
                                 std::size_t& off) {
  WorldSpec spec;
  spec.num_clients = wire::get_i32(buf, off);
  spec.num_style_clusters = wire::get_i32(buf, off);
  spec.d_in = wire::get_i32(buf, off);
  spec.d_out = wire::get_i32(buf, off);
  spec.sigma_id = wire::get_f64(buf, off);
  spec.sigma_style = wire::get_f64(buf, off);
  spec.sigma_noise = wire::get_f64(buf, off);
  spec.samples.neutral_train = wire::get_i32(buf, off);
  spec.samples.neutral_val = wire::get_i32(buf, off);
  spec.samples.neutral_test = wire::get_i32(buf, off);
  spec.samples.expressive_train = wire::get_i32(buf, off);
  spec.samples.expressive_val = wire::get_i32(buf, off);
  spec.samples.expressive_test = wire::get_i32(buf, off);
  spec.seed = wire::get_u64(buf, off);
  return spec;
}

/// Hash of the canonical spec serialization; snapshots and result records
/// carry it so sweeps can prove they ran on the same world.
inline std::uint64_t spec_hash(const WorldSpec& spec) {
  std::vector<std::uint8_t> buf;
  append_world_spec(buf, spec);
  return fnv1a64(buf.data(), buf.size());
}

namespace detail {

inline constexpr std::uint32_t kWorldMagic = 0x31575046;  // "FPW1"

inline void append_batch(std::vector<std::uint8_t>& out, const Batch& batch) {
  wire::put_sized_matrix(out, batch.inputs);
  wire::put_sized_matrix(out, batch.targets);
  wire::put_i32(out, batch.style ? *batch.style : -1);
}

inline Batch read_batch(std::span<const std::uint8_t> buf, std::size_t& off) {
  Batch batch;
  batch.inputs = wire::get_sized_matrix(buf, off);
  batch.targets = wire::get_sized_matrix(buf, off);
  const int style = wire::get_i32(buf, off);
  if (style >= 0) batch.style = style;
  return batch;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_world(const World& world) {
  std::vector<std::uint8_t> out;
  wire::put_u32(out, detail::kWorldMagic);
  append_world_spec(out, world.spec);
  wire::put_u64(out, spec_hash(world.spec));
  wire::put_sized_matrix(out, world.backbone.w0);
  for (const Matrix& s : world.style_truth) wire::put_sized_matrix(out, s);
  for (int i = 0; i < world.spec.num_clients; ++i) {
    wire::put_i32(out, world.assignment[i]);
    wire::put_sized_matrix(out, world.id_truth[i]);
    const ClientData& cd = world.data[i];
    detail::append_batch(out, cd.neutral_train);
    detail::append_batch(out, cd.neutral_val);
    detail::append_batch(out, cd.neutral_test);
    detail::append_batch(out, cd.expressive_train);
    detail::append_batch(out, cd.expressive_val);
    detail::append_batch(out, cd.expressive_test);
  }
  return out;
}

inline World deserialize_world(std::span<const std::uint8_t> buf) try {
  std::size_t off = 0;
  if (wire::get_u32(buf, off) != detail::kWorldMagic) {
    throw IoError("world snapshot: bad magic");
  }
  World world;
  world.spec = read_world_spec(buf, off);
  const std::uint64_t stored_hash = wire::get_u64(buf, off);
  if (stored_hash != spec_hash(world.spec)) {
    throw IoError("world snapshot: spec hash mismatch");
  }
  world.spec.validate();
  world.backbone.w0 = wire::get_sized_matrix(buf, off);
  world.style_truth.reserve(world.spec.num_style_clusters);
  for (int c = 0; c < world.spec.num_style_clusters; ++c) {
    world.style_truth.push_back(wire::get_sized_matrix(buf, off));
  }
  for (int i = 0; i < world.spec.num_clients; ++i) {
    world.assignment.push_back(wire::get_i32(buf, off));
    world.id_truth.push_back(wire::get_sized_matrix(buf, off));
    ClientData cd;
    cd.neutral_train = detail::read_batch(buf, off);
    cd.neutral_val = detail::read_batch(buf, off);
    cd.neutral_test = detail::read_batch(buf, off);
    cd.expressive_train = detail::read_batch(buf, off);
    cd.expressive_val = detail::read_batch(buf, off);
    cd.expressive_test = detail::read_batch(buf, off);
    world.data.push_back(std::move(cd));
  }
  if (off != buf.size()) throw IoError("world snapshot: trailing bytes");
  return world;
} catch (const ProtocolError& e) {
  // Wire-level truncation inside a snapshot is a file problem, not a
  // network one; present it under the file error type.
  throw IoError(std::string("world snapshot: ") + e.what());
}

inline void save_world(const std::filesystem::path& path, const World& world) {
  const auto bytes = serialize_world(world);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open world snapshot for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to world snapshot: " + path.string());
}

inline World load_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open world snapshot: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_world(bytes);
}

}  // namespace fedpisa
