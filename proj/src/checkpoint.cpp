// SPDX-License-Identifier: Apache-2.0

#include "checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "common.hpp"

namespace ks {

namespace {

constexpr char kMagic[4] = {'K', 'S', 'A', 'T'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4] = {0, 0, 0, 0};
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_record(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(kDtypeF64));
  os.put(static_cast<char>(t.rank()));
  for (int64_t dim : t.shape()) put_u64(os, static_cast<uint64_t>(dim));
  for (double v : t.span()) put_u64(os, std::bit_cast<uint64_t>(v));
}

Tensor config_record(const ModelConfig& c) {
  return Tensor({11},
                {static_cast<double>(c.image_size), static_cast<double>(c.patch),
                 static_cast<double>(c.d), static_cast<double>(c.heads),
                 static_cast<double>(c.d_ff), static_cast<double>(c.enc_layers),
                 static_cast<double>(c.dec_layers),
                 static_cast<double>(c.queries), static_cast<double>(c.classes),
                 c.norm == NormScheme::kBranchLn ? 0.0 : 1.0,
                 c.theta ? *c.theta : -1.0});
}

ModelConfig config_from_record(const Tensor& t) {
  if (t.numel() != 11)
    fail(ErrorKind::kIo, "checkpoint: malformed meta/config record");
  const double* v = t.data();
  ModelConfig c;
  c.image_size = static_cast<int64_t>(v[0]);
  c.patch = static_cast<int64_t>(v[1]);
  c.d = static_cast<int64_t>(v[2]);
  c.heads = static_cast<int64_t>(v[3]);
  c.d_ff = static_cast<int64_t>(v[4]);
  c.enc_layers = static_cast<int64_t>(v[5]);
  c.dec_layers = static_cast<int64_t>(v[6]);
  c.queries = static_cast<int64_t>(v[7]);
  c.classes = static_cast<int64_t>(v[8]);
  c.norm = v[9] == 0.0 ? NormScheme::kBranchLn : NormScheme::kPostAddLn;
  c.theta = v[10] < 0.0 ? std::nullopt : std::optional<double>(v[10]);
  return c;
}

std::map<std::string, Tensor> read_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kIo, "cannot open checkpoint '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorKind::kIo, "'" + path + "' is not a checkpoint file");
  const uint32_t version = get_u32(is);
  if (version != kVersion)
    fail(ErrorKind::kIo, "unsupported checkpoint version " +
                             std::to_string(version) + " in '" + path + "'");
  std::map<std::string, Tensor> out;
  while (true) {
    const uint32_t name_len = get_u32(is);
    if (is.eof()) break;
    if (!is || name_len > 4096)
      fail(ErrorKind::kIo, "corrupt checkpoint record in '" + path + "'");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    const int rank = is.get();
    if (!is || dtype != kDtypeF64 || rank < 0 || rank > 8)
      fail(ErrorKind::kIo, "corrupt checkpoint record in '" + path + "'");
    Shape shape;
    int64_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      shape.push_back(static_cast<int64_t>(get_u64(is)));
      numel *= shape.back();
    }
    if (!is || numel < 0 || numel > (1 << 28))
      fail(ErrorKind::kIo, "corrupt checkpoint record in '" + path + "'");
    std::vector<double> data(static_cast<size_t>(numel));
    for (double& v : data) v = std::bit_cast<double>(get_u64(is));
    if (!is) fail(ErrorKind::kIo, "truncated checkpoint '" + path + "'");
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::kIo, "cannot write checkpoint '" + path + "'");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_record(os, "meta/config", config_record(params.config));
  visit_params(
      params,
      [&os](const std::string& name, Tensor& t) { put_record(os, name, t); },
      params.has_teacher);
  if (!os) fail(ErrorKind::kIo, "write failure on checkpoint '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
  std::map<std::string, Tensor> records = read_records(path);
  auto meta = records.find("meta/config");
  if (meta == records.end())
    fail(ErrorKind::kIo, "checkpoint '" + path + "' lacks meta/config");
  ModelParams p = allocate_model(config_from_record(meta->second));
  p.has_teacher = records.count("teacher/smlp/w") > 0;
  if (!p.has_teacher) p.teacher = TeacherParams{};
  visit_params(
      p,
      [&](const std::string& name, Tensor& t) {
        auto it = records.find(name);
        if (it == records.end())
          fail(ErrorKind::kIo,
               "checkpoint '" + path + "' lacks tensor '" + name + "'");
        if (it->second.shape() != t.shape())
          fail(ErrorKind::kIo,
               "checkpoint tensor '" + name + "' has shape " +
                   shape_str(it->second.shape()) + ", expected " +
                   shape_str(t.shape()));
        t = it->second;
      },
      p.has_teacher);
  return p;
}

void strip_checkpoint(const std::string& src, const std::string& dst) {
  ModelParams p = load_checkpoint(src);
  strip_teacher(p);
  save_checkpoint(dst, p);
}

}  // namespace ks
