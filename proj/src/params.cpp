#include "rimae/params.hpp"

#include <cstring>
#include <fstream>

namespace rimae {

namespace {

constexpr char kMagic[4] = {'R', 'I', 'M', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

double get_f64(std::istream& is) {
  std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamTree& flat, const nlohmann::json& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  put_u64(out, kVersion);
  const std::string m = manifest.dump();
  put_u64(out, m.size());
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  put_u64(out, flat.params.size());
  for (const auto& [name, t] : flat.params) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, t.shape().size());
    for (Index e : t.shape()) put_u64(out, static_cast<std::uint64_t>(e));
    for (Index i = 0; i < t.size(); ++i) put_f64(out, static_cast<double>(t.data()[i]));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

std::pair<ParamTree, nlohmann::json> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad checkpoint magic: " + path);
  if (get_u64(in) != kVersion) throw std::runtime_error("unsupported checkpoint version: " + path);
  const std::uint64_t mlen = get_u64(in);
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  nlohmann::json manifest = nlohmann::json::parse(mstr);
  const std::uint64_t count = get_u64(in);
  ParamTree tree;
  for (std::uint64_t p = 0; p < count; ++p) {
    const std::uint64_t nlen = get_u64(in);
    std::string name(nlen, '\0');
    in.read(name.data(), static_cast<std::streamsize>(nlen));
    const std::uint64_t rank = get_u64(in);
    Shape shape(rank);
    for (std::uint64_t d = 0; d < rank; ++d) shape[d] = static_cast<Index>(get_u64(in));
    Tensor t(shape);
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Real>(get_f64(in));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    tree.add(name, std::move(t));
  }
  return {std::move(tree), std::move(manifest)};
}

}  // namespace rimae
