#include "bivm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace bivm {

namespace {

constexpr char kMagic[4] = {'B', 'I', 'V', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  BIVM_CHECK(is.good(), "checkpoint truncated");
  return v;
}

uint64_t get_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  BIVM_CHECK(is.good(), "checkpoint truncated");
  return v;
}

void put_blob(std::ostream& os, const std::string& name, const float* data,
              size_t count) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<uint32_t>(count));
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(count * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, BivmModel& model) {
  std::vector<ParamRefT<float>> params;
  std::vector<StateRefT<float>> state;
  model.collect(params, state);

  std::ofstream os(path, std::ios::binary);
  BIVM_CHECK(os.good(), "cannot write checkpoint: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u64(os, model.cfg.digest());
  put_u32(os, static_cast<uint32_t>(params.size() + state.size()));
  for (const auto& p : params)
    put_blob(os, p.name, p.var->val().data(), p.var->val().vec().size());
  for (const auto& s : state) put_blob(os, s.name, s.tensor->data(), s.tensor->vec().size());
  float tau = model.tau_star;
  os.write(reinterpret_cast<const char*>(&tau), sizeof(tau));
  BIVM_CHECK(os.good(), "checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, BivmModel& model) {
  std::ifstream is(path, std::ios::binary);
  BIVM_CHECK(is.good(), "cannot open checkpoint: " + path);
  char magic[4] = {};
  is.read(magic, 4);
  BIVM_CHECK(is.good() && std::memcmp(magic, kMagic, 4) == 0, "not a checkpoint file");
  uint32_t version = get_u32(is);
  BIVM_CHECK(version == kVersion, "unsupported checkpoint version");
  uint64_t digest = get_u64(is);
  BIVM_CHECK(digest == model.cfg.digest(),
             "checkpoint was written for a different model config");

  uint32_t count = get_u32(is);
  std::map<std::string, std::vector<float>> blobs;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t n = get_u32(is);
    std::vector<float> data(n);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(sizeof(float) * n));
    BIVM_CHECK(is.good(), "checkpoint truncated in blob " + name);
    BIVM_CHECK(blobs.emplace(name, std::move(data)).second,
               "duplicate checkpoint blob: " + name);
  }
  float tau = 0.0f;
  is.read(reinterpret_cast<char*>(&tau), sizeof(tau));
  BIVM_CHECK(is.good(), "checkpoint missing threshold record");

  std::vector<ParamRefT<float>> params;
  std::vector<StateRefT<float>> state;
  model.collect(params, state);
  BIVM_CHECK(params.size() + state.size() == blobs.size(),
             "checkpoint blob count does not match the model");
  auto restore = [&blobs](const std::string& name, std::vector<float>& dst) {
    auto it = blobs.find(name);
    BIVM_CHECK(it != blobs.end(), "checkpoint missing blob: " + name);
    BIVM_CHECK(it->second.size() == dst.size(), "size mismatch in blob: " + name);
    dst = it->second;
  };
  for (auto& p : params) restore(p.name, p.var->mutable_val().vec());
  for (auto& s : state) restore(s.name, s.tensor->vec());
  model.tau_star = tau;
}

}  // namespace bivm
