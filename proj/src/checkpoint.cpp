#include "m3snet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "m3snet/text.hpp"

namespace m3snet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const std::string* Checkpoint::find(std::string_view key) const {
  for (const auto& [k, v] : header)
    if (k == key) return &v;
  return nullptr;
}

const std::string& Checkpoint::get(std::string_view key) const {
  if (const auto* v = find(key)) return *v;
  throw IoError("checkpoint header has no '" + std::string(key) + "'");
}

void Checkpoint::set(std::string key, std::string value) {
  for (auto& [k, v] : header) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  header.emplace_back(std::move(key), std::move(value));
}

const Tensor<float>& Checkpoint::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw IoError("checkpoint has no tensor '" + std::string(name) + "'");
}

namespace {

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(std::string_view text) {
  Shape s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto x = std::min(text.find('x', pos), text.size());
    s.push_back(parse_int64("tensor shape", text.substr(pos, x - pos)));
    if (s.back() < 1) throw IoError("checkpoint: non-positive tensor extent");
    pos = x + 1;
  }
  return s;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string header;
  for (const auto& [k, v] : ckpt.header) {
    if (k.empty() || k == "tensor" || k.find_first_of("=\n") != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw IoError("checkpoint: unencodable header entry '" + k + "'");
    }
    header += k + "=" + v + "\n";
  }
  std::size_t payload = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) throw IoError("checkpoint: bad tensor name '" + name + "'");
    header += "tensor=" + name + " f32 " + shape_text(t.shape()) + "\n";
    payload += t.size() * sizeof(float);
  }
  std::string out;
  out.reserve(kCheckpointMagic.size() + 8 + header.size() + payload);
  out += kCheckpointMagic;
  const std::uint64_t len = header.size();
  char lenbuf[8];
  std::memcpy(lenbuf, &len, 8);
  out.append(lenbuf, 8);
  out += header;
  for (const auto& [name, t] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw IoError("not a checkpoint (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + kCheckpointMagic.size(), 8);
  const std::size_t start = kCheckpointMagic.size() + 8;
  if (len > bytes.size() - start) throw IoError("checkpoint truncated in header");
  const std::string_view header = bytes.substr(start, len);
  Checkpoint ckpt;
  std::vector<std::pair<std::string, Shape>> manifest;
  std::size_t pos = 0;
  while (pos < header.size()) {
    const auto nl = header.find('\n', pos);
    if (nl == std::string_view::npos) throw IoError("checkpoint header missing final newline");
    const auto line = header.substr(pos, nl - pos);
    pos = nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || eq == 0) throw IoError("checkpoint header line without key: " + std::string(line));
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "tensor") {
      const auto s1 = value.find(' ');
      const auto s2 = s1 == std::string_view::npos ? s1 : value.find(' ', s1 + 1);
      if (s2 == std::string_view::npos) throw IoError("bad tensor manifest line: " + std::string(line));
      if (value.substr(s1 + 1, s2 - s1 - 1) != "f32") throw IoError("unsupported dtype in: " + std::string(line));
      manifest.emplace_back(std::string(value.substr(0, s1)), parse_shape(value.substr(s2 + 1)));
    } else {
      ckpt.header.emplace_back(std::string(key), std::string(value));
    }
  }
  std::size_t offset = start + len;
  for (auto& [name, shape] : manifest) {
    const std::size_t n = static_cast<std::size_t>(numel(shape));
    if (n * sizeof(float) > bytes.size() - offset) throw IoError("checkpoint truncated in tensor " + name);
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + offset, n * sizeof(float));
    offset += n * sizeof(float);
    ckpt.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (offset != bytes.size()) throw IoError("checkpoint has trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace m3snet
