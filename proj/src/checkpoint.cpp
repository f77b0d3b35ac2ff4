#include "dfca/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "dfca/model.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace dfca {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'C', 'A'};

template <class T>
void put(std::string& out, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.append(raw, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string module_of(const std::string& name) {
  auto dot = name.rfind('.');
  return dot == std::string::npos ? std::string() : name.substr(0, dot);
}

void assign(Tensor& dst, const Tensor& src) {
  Tensor converted = src.dtype() == dst.dtype() ? src : src.to(dst.dtype());
  dst.mutable_buffer() = converted.buffer();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_checkpoint(const TensorEntries& entries) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto d = t.data<T>();
      out.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
    });
  }
  return out;
}

TensorEntries decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(r.take(4), kMagic, 4) != 0) throw std::runtime_error("not a DFCA checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  TensorEntries entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name(r.take(len), len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw std::runtime_error("checkpoint entry '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint64_t>();
      if (e == 0 || e > (1ull << 40)) throw std::runtime_error("checkpoint entry '" + name + "' has bad extent");
      shape.push_back(static_cast<std::int64_t>(e));
    }
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw std::runtime_error("checkpoint entry '" + name + "' has unknown dtype tag");
    const auto dt = static_cast<DType>(tag);
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    Buffer buf(dt, n);
    dispatch(dt, [&](auto t) {
      using T = decltype(t);
      auto dst = buf.as<T>();
      std::memcpy(dst.data(), r.take(n * sizeof(T)), n * sizeof(T));
    });
    entries.emplace_back(std::move(name), Tensor::from_buffer(std::move(shape), std::move(buf)));
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");
  return entries;
}

void write_checkpoint(const std::string& path, const TensorEntries& entries) {
  const std::string bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

void write_checkpoint(const std::string& path, const TensorList& tensors) {
  TensorEntries entries;
  for (const auto& e : tensors) entries.emplace_back(e.name, e.tensor);
  write_checkpoint(path, entries);
}

TensorEntries read_checkpoint(const std::string& path) { return decode_checkpoint(slurp(path)); }

void write_tensor_file(const std::string& path, const std::string& name, const Tensor& t) {
  write_checkpoint(path, TensorEntries{{name, t}});
}

Tensor read_tensor_file(const std::string& path, std::string* name) {
  auto entries = read_checkpoint(path);
  if (entries.size() != 1) throw std::runtime_error("'" + path + "' holds " + std::to_string(entries.size()) + " tensors, expected 1");
  if (name) *name = entries[0].first;
  return entries[0].second;
}

LoadReport load_into(const TensorList& target, const TensorEntries& entries, LoadMode mode,
                     const std::string& only_prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  auto matches = [&](const NamedTensor& nt) {
    auto it = by_name.find(nt.name);
    return it != by_name.end() && it->second->shape() == nt.tensor.shape();
  };
  auto wanted = [&](const std::string& name) { return name.rfind(only_prefix, 0) == 0; };

  LoadReport report;
  std::map<std::string, bool> used;
  if (mode == LoadMode::strict) {
    for (const auto& nt : target) {
      if (!wanted(nt.name)) continue;
      auto it = by_name.find(nt.name);
      if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor '" + nt.name + "'");
      if (it->second->shape() != nt.tensor.shape())
        throw std::runtime_error("shape mismatch for '" + nt.name + "': model " + shape_str(nt.tensor.shape()) +
                                 ", checkpoint " + shape_str(it->second->shape()));
    }
    std::map<std::string, bool> known;
    for (const auto& nt : target) known[nt.name] = true;
    for (const auto& [name, t] : entries)
      if (wanted(name) && !known.count(name)) throw std::runtime_error("checkpoint tensor '" + name + "' unknown to model");
  }

  std::map<std::string, bool> module_ok;
  for (const auto& nt : target) {
    auto [it, fresh] = module_ok.try_emplace(module_of(nt.name), true);
    it->second = it->second && matches(nt);
  }
  for (const auto& nt : target) {
    if (wanted(nt.name) && module_ok[module_of(nt.name)]) {
      Tensor dst = nt.tensor;
      assign(dst, *by_name[nt.name]);
      report.loaded.push_back(nt.name);
      used[nt.name] = true;
    } else {
      report.skipped.push_back(nt.name);
    }
  }
  for (const auto& [name, t] : entries)
    if (!used.count(name)) report.unused.push_back(name);
  return report;
}

LoadReport load_into(DFCANet& model, const TensorEntries& entries, LoadMode mode, const std::string& only_prefix) {
  return load_into(model.tensors(), entries, mode, only_prefix);
}

void save_model(const DFCANet& model, const std::string& path) { write_checkpoint(path, model.tensors()); }

}  // namespace dfca
