// Binary checkpoints.
//
// Layout (little-endian):
//   "SEQJ" | u32 version | u32 count | count x tensor      model parameters
//   u32 count | count x tensor                             optimizer state
//   u64 master PRNG state
//   u32 length | JSON config echo
// tensor := u16 name length | name | u8 rank | rank x u64 dim | f64 payload

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqj/train.hpp"

namespace seqj {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
 public:
  CheckpointMagicError() : CheckpointError("checkpoint: bad magic") {}
};
class CheckpointVersionError : public CheckpointError {
 public:
  explicit CheckpointVersionError(std::uint32_t v)
      : CheckpointError("checkpoint: unsupported version " + std::to_string(v) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")") {}
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  explicit CheckpointTruncatedError(const std::string& where) : CheckpointError("checkpoint: truncated while reading " + where) {}
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> optimizer;
  std::uint64_t prng_state = 0;
  std::string config_json;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
  }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
  void tensor(const NamedTensor& t) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("checkpoint: tensor name too long: " + t.name);
    put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    bytes(t.name);
    put<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) put<std::uint64_t>(d);
    for (double v : t.value.data()) put<double>(v);
  }
  std::vector<unsigned char> out;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& b) : b_(b) {}

  template <class T>
  T get(const std::string& where) {
    need(sizeof(T), where);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n, const std::string& where) {
    need(n, where);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  NamedTensor tensor(const std::string& where) {
    NamedTensor t;
    t.name = bytes(get<std::uint16_t>(where + " name length"), where + " name");
    const auto rank = get<std::uint8_t>(t.name + " rank");
    if (rank == 0) throw CheckpointError("checkpoint: tensor " + t.name + " has rank 0");
    Shape shape;
    std::size_t n = 1;
    for (unsigned k = 0; k < rank; ++k) {
      const auto d = get<std::uint64_t>(t.name + " dims");
      if (d == 0 || d > remaining()) throw CheckpointError("checkpoint: tensor " + t.name + " has an invalid extent");
      shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    if (n > remaining() / sizeof(double)) throw CheckpointTruncatedError(t.name + " payload");
    std::vector<double> data(n);
    std::memcpy(data.data(), b_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    t.value = Tensor(std::move(shape), std::move(data));
    return t;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& where) const {
    if (remaining() < n) throw CheckpointTruncatedError(where);
  }
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes("SEQJ");
  w.put<std::uint32_t>(c.version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.parameters.size()));
  for (const auto& t : c.parameters) w.tensor(t);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& t : c.optimizer) w.tensor(t);
  w.put<std::uint64_t>(c.prng_state);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.config_json.size()));
  w.bytes(c.config_json);
  return std::move(w.out);
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SEQJ", 4) != 0) throw CheckpointMagicError();
  detail::ByteReader r(bytes);
  r.bytes(4, "magic");
  Checkpoint c;
  c.version = r.get<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) throw CheckpointVersionError(c.version);
  const auto np = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < np; ++i) c.parameters.push_back(r.tensor("parameter " + std::to_string(i)));
  const auto no = r.get<std::uint32_t>("optimizer count");
  for (std::uint32_t i = 0; i < no; ++i) c.optimizer.push_back(r.tensor("optimizer tensor " + std::to_string(i)));
  c.prng_state = r.get<std::uint64_t>("prng state");
  c.config_json = r.bytes(r.get<std::uint32_t>("config length"), "config");
  if (r.remaining() != 0) throw CheckpointError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

/// Snapshot of everything needed to resume training exactly.
inline Checkpoint make_checkpoint(Trainer& tr) {
  Checkpoint c;
  const auto& params = tr.optimizer().parameters();
  for (const Parameter* p : params) c.parameters.push_back({p->name, p->value});
  for (std::size_t k = 0; k < params.size(); ++k) c.optimizer.push_back({"adam.m/" + params[k]->name, tr.optimizer().first_moments()[k]});
  for (std::size_t k = 0; k < params.size(); ++k) c.optimizer.push_back({"adam.v/" + params[k]->name, tr.optimizer().second_moments()[k]});
  // Step counts stay exact in a double far beyond any realistic run.
  c.optimizer.push_back({"adam.step", Tensor::scalar(static_cast<double>(tr.optimizer().steps()))});
  c.prng_state = tr.master_rng().state();
  c.config_json = to_json(tr.config()).dump();
  return c;
}

/// Copies a checkpoint into a trainer built for a compatible configuration.
inline void restore_checkpoint(Trainer& tr, const Checkpoint& c) {
  const auto& params = tr.optimizer().parameters();
  auto check = [](const NamedTensor& got, const std::string& name, const Shape& shape) {
    if (got.name != name || got.value.shape() != shape) {
      throw CheckpointShapeError("checkpoint: tensor mismatch at '" + name + "' " + shape_str(shape) + ", file has '" +
                                 got.name + "' " + shape_str(got.value.shape()));
    }
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (k >= c.parameters.size()) {
      throw CheckpointShapeError("checkpoint: tensor mismatch at '" + params[k]->name + "', missing from file");
    }
    check(c.parameters[k], params[k]->name, params[k]->value.shape());
  }
  if (c.parameters.size() != params.size()) {
    throw CheckpointShapeError("checkpoint: tensor mismatch at '" + c.parameters[params.size()].name +
                               "', not present in the model");
  }
  if (c.optimizer.size() != 2 * params.size() + 1) throw CheckpointShapeError("checkpoint: optimizer state has the wrong tensor count");
  for (std::size_t k = 0; k < params.size(); ++k) {
    check(c.optimizer[k], "adam.m/" + params[k]->name, params[k]->value.shape());
    check(c.optimizer[params.size() + k], "adam.v/" + params[k]->name, params[k]->value.shape());
  }
  check(c.optimizer.back(), "adam.step", Shape{1});
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k]->value = c.parameters[k].value;
    tr.optimizer().first_moments()[k] = c.optimizer[k].value;
    tr.optimizer().second_moments()[k] = c.optimizer[params.size() + k].value;
  }
  tr.optimizer().set_steps(static_cast<std::uint64_t>(c.optimizer.back().value[0]));
  tr.master_rng().set_state(c.prng_state);
}

inline void save_checkpoint(const std::filesystem::path& path, Trainer& tr) {
  const std::vector<unsigned char> bytes = encode_checkpoint(make_checkpoint(tr));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline TrainConfig checkpoint_config(const Checkpoint& c) {
  try {
    return train_config_from_json(nlohmann::json::parse(c.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: unreadable config echo: ") + e.what());
  }
}

/// Rebuilds the trainer recorded in a checkpoint file.
inline std::unique_ptr<Trainer> load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint c = read_checkpoint(path);
  auto tr = std::make_unique<Trainer>(checkpoint_config(c));
  restore_checkpoint(*tr, c);
  return tr;
}

}  // namespace seqj
