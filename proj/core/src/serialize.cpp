#include "micromoe/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "micromoe/rng.hpp"

namespace micromoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload writer assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'M', 'O', 'E', 'C', 'K', 'P', '1'};

void append_doubles(std::vector<double>& payload, const double* src,
                    std::size_t n, std::uint64_t& offset_out) {
  offset_out = payload.size();
  payload.insert(payload.end(), src, src + n);
}

}  // namespace

std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["phase"] = ck.phase;
  header["step"] = ck.step;
  header["config_hash"] = ck.config_hash;
  header["corpus_seed"] = ck.corpus_seed;
  header["model_config"] = ck.model_config;

  std::vector<double> payload;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, tensor] : ck.params.entries()) {
    std::uint64_t off = 0;
    append_doubles(payload, tensor->data(), tensor->size(), off);
    params.push_back({{"name", name},
                      {"shape", {tensor->rows(), tensor->cols()}},
                      {"frozen", !tensor->requires_grad},
                      {"offset", off}});
  }
  header["params"] = params;

  if (ck.optim) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, mom] : ck.optim->moments) {
      std::uint64_t om = 0, ov = 0;
      append_doubles(payload, mom.m.data(), mom.m.size(), om);
      append_doubles(payload, mom.v.data(), mom.v.size(), ov);
      entries.push_back({{"name", name},
                         {"size", mom.m.size()},
                         {"offset_m", om},
                         {"offset_v", ov}});
    }
    header["optim"] = {{"step", ck.optim->step}, {"entries", entries}};
  } else {
    header["optim"] = nullptr;
  }

  std::string head = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t hlen = head.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(head);

  std::vector<double> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0)
      throw std::runtime_error("corrupt checkpoint payload");
    payload.resize(rest.size() / sizeof(double));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }

  Checkpoint ck;
  ck.phase = header.at("phase").get<std::string>();
  ck.step = header.at("step").get<long>();
  ck.config_hash = header.at("config_hash").get<std::string>();
  ck.corpus_seed = header.at("corpus_seed").get<std::uint64_t>();
  ck.model_config = header.at("model_config");

  for (const auto& p : header.at("params")) {
    std::size_t rows = p.at("shape")[0].get<std::size_t>();
    std::size_t cols = p.at("shape")[1].get<std::size_t>();
    std::uint64_t off = p.at("offset").get<std::uint64_t>();
    if (off + rows * cols > payload.size())
      throw std::runtime_error("checkpoint payload out of range");
    Tensor t(rows, cols);
    std::memcpy(t.data(), payload.data() + off, rows * cols * sizeof(double));
    auto ptr = ck.params.add(p.at("name").get<std::string>(), std::move(t));
    ptr->requires_grad = !p.at("frozen").get<bool>();
  }

  if (!header.at("optim").is_null()) {
    OptimSnapshot snap;
    snap.step = header["optim"].at("step").get<long>();
    for (const auto& e : header["optim"].at("entries")) {
      std::size_t size = e.at("size").get<std::size_t>();
      std::uint64_t om = e.at("offset_m").get<std::uint64_t>();
      std::uint64_t ov = e.at("offset_v").get<std::uint64_t>();
      if (om + size > payload.size() || ov + size > payload.size())
        throw std::runtime_error("checkpoint optimizer payload out of range");
      AdamW::Moments mom;
      mom.m.assign(payload.begin() + static_cast<std::ptrdiff_t>(om),
                   payload.begin() + static_cast<std::ptrdiff_t>(om + size));
      mom.v.assign(payload.begin() + static_cast<std::ptrdiff_t>(ov),
                   payload.begin() + static_cast<std::ptrdiff_t>(ov + size));
      snap.moments[e.at("name").get<std::string>()] = std::move(mom);
    }
    ck.optim = std::move(snap);
  }
  return ck;
}

}  // namespace micromoe
