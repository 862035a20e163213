#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hat/io.hpp"

namespace hat {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

// Sequential reader with truncation checks.
class Cursor {
 public:
  Cursor(const std::string& raw, const std::string& path)
      : raw_(raw), path_(path) {}

  const unsigned char* take(std::size_t n) {
    if (pos_ + n > raw_.size()) {
      throw FormatError(path_ + ": truncated checkpoint");
    }
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(raw_.data()) + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = take(4);
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
           (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  }

  bool at_end() const { return pos_ == raw_.size(); }

 private:
  const std::string& raw_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

void append_entry(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (int d = 0; d < t.ndim(); ++d) {
    put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
  }
  const real* src = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    put_f32(out, static_cast<float>(src[i]));
  }
}

bool is_adam_entry(const std::string& name) {
  return name.rfind("adam.", 0) == 0;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamTree& params,
                     const AdamState* adam) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& [name, t] : params) entries.emplace_back(name, t);
  if (adam != nullptr) {
    if (adam->m.size() != params.size() || adam->v.size() != params.size()) {
      throw InternalError("save_checkpoint: optimizer state size mismatch");
    }
    std::size_t i = 0;
    for (const auto& [name, t] : params) {
      entries.emplace_back("adam.m." + name, adam->m[i]);
      entries.emplace_back("adam.v." + name, adam->v[i]);
      ++i;
    }
    Tensor t_step({1});
    t_step.data()[0] = static_cast<real>(adam->t);
    entries.emplace_back("adam.t", t_step);
  }

  std::string out = "HATC";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) append_entry(out, name, t);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw UsageError("write failed on " + path);
}

ParamTree load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string raw = buf.str();

  Cursor cur(raw, path);
  const unsigned char* magic = cur.take(4);
  if (std::memcmp(magic, "HATC", 4) != 0) {
    throw FormatError(path + ": not a checkpoint file");
  }
  const std::uint32_t version = cur.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  const std::uint32_t count = cur.u32();
  ParamTree tree;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = cur.u32();
    const unsigned char* name_bytes = cur.take(name_len);
    const std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    if (tree.find(name) != nullptr) {
      throw FormatError(path + ": duplicate entry '" + name + "'");
    }
    const std::uint32_t rank = cur.u32();
    if (rank > 8) {
      throw FormatError(path + ": implausible tensor rank in '" + name + "'");
    }
    std::vector<std::int64_t> dims(rank);
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      dims[d] = cur.u32();
      if (dims[d] < 1 || numel > (1LL << 40) / std::max<std::int64_t>(dims[d], 1)) {
        throw FormatError(path + ": implausible tensor shape in '" + name + "'");
      }
      numel *= dims[d];
    }
    Tensor t(dims);
    real* dst = t.data();
    for (std::int64_t i = 0; i < numel; ++i) {
      const std::uint32_t bits = cur.u32();
      float v;
      std::memcpy(&v, &bits, 4);
      dst[i] = static_cast<real>(v);
    }
    tree.add(name, t);
  }
  if (!cur.at_end()) {
    throw FormatError(path + ": trailing bytes after last entry");
  }
  return tree;
}

ApplyReport apply_checkpoint(ParamTree& target, const ParamTree& source,
                             bool strict) {
  ApplyReport report;
  std::vector<std::string> offenders;

  // Classify first: nothing is copied in strict mode unless everything fits.
  std::vector<std::pair<const Tensor*, const Tensor*>> copies;  // dst, src
  for (const auto& [name, t] : target) {
    const Tensor* s = source.find(name);
    if (s == nullptr) {
      report.missing_target.push_back(name);
      offenders.push_back("missing from checkpoint: " + name);
    } else if (s->shape() != t.shape()) {
      report.missing_target.push_back(name);
      offenders.push_back("shape mismatch on " + name + ": checkpoint " +
                          shape_str(s->shape()) + " vs model " +
                          shape_str(t.shape()));
    } else {
      copies.emplace_back(&t, s);
      report.loaded.push_back(name);
    }
  }
  for (const auto& [name, s] : source) {
    if (is_adam_entry(name)) continue;  // optimizer sidecar, handled elsewhere
    const Tensor* t = target.find(name);
    if (t == nullptr || t->shape() != s.shape()) {
      report.skipped_source.push_back(name);
      if (t == nullptr) {
        offenders.push_back("not in model: " + name);
      }
    }
  }

  if (strict && !offenders.empty()) {
    std::string msg = "checkpoint does not match the model (" +
                      std::to_string(offenders.size()) + " problems):";
    const std::size_t show = std::min<std::size_t>(offenders.size(), 10);
    for (std::size_t i = 0; i < show; ++i) msg += "\n  " + offenders[i];
    if (offenders.size() > show) {
      msg += "\n  ... and " + std::to_string(offenders.size() - show) + " more";
    }
    throw UsageError(msg);
  }

  for (auto& [dst, src] : copies) {
    Tensor d = *dst;  // shares storage with the model
    std::memcpy(d.data(), src->data(),
                sizeof(real) * static_cast<std::size_t>(src->numel()));
  }
  return report;
}

bool extract_adam(const ParamTree& loaded, const ParamTree& params,
                  AdamState* out) {
  const Tensor* step = loaded.find("adam.t");
  if (step == nullptr) return false;
  AdamState state;
  state.t = std::llround(static_cast<double>(step->data()[0]));
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& [name, t] : params) {
    const Tensor* m = loaded.find("adam.m." + name);
    const Tensor* v = loaded.find("adam.v." + name);
    if (m == nullptr || v == nullptr || m->shape() != t.shape() ||
        v->shape() != t.shape()) {
      throw FormatError("optimizer state does not mirror the parameters (" +
                        name + ")");
    }
    state.m.push_back(m->detach_copy());
    state.v.push_back(v->detach_copy());
  }
  *out = std::move(state);
  return true;
}

}  // namespace hat
