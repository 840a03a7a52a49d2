#include "icr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace icr {

// ---- IDX -----------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

uint32_t be32(const unsigned char* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void put_be32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

struct IdxArray {
  std::vector<uint32_t> dims;
  std::vector<unsigned char> data;
};

IdxArray parse_idx(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 4) throw std::runtime_error("truncated IDX file: " + path);
  if (bytes[0] != 0 || bytes[1] != 0)
    throw std::runtime_error("bad IDX magic in " + path);
  if (bytes[2] != 0x08)
    throw std::runtime_error("unsupported IDX element type in " + path +
                             " (only unsigned byte 0x08)");
  const unsigned nd = bytes[3];
  if (nd == 0 || bytes.size() < 4 + 4ull * nd)
    throw std::runtime_error("truncated IDX header: " + path);
  IdxArray a;
  uint64_t total = 1;
  for (unsigned i = 0; i < nd; ++i) {
    a.dims.push_back(be32(bytes.data() + 4 + 4 * i));
    total *= a.dims.back();
  }
  if (bytes.size() != 4 + 4ull * nd + total)
    throw std::runtime_error("truncated IDX payload: " + path);
  a.data.assign(bytes.begin() + 4 + 4 * nd, bytes.end());
  return a;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  IdxArray imgs = parse_idx(images_path);
  IdxArray labs = parse_idx(labels_path);
  if (imgs.dims.size() != 3 && imgs.dims.size() != 4)
    throw std::runtime_error("IDX image file must be (N,H,W) or (N,C,H,W): " + images_path);
  if (labs.dims.size() != 1)
    throw std::runtime_error("IDX label file must be one-dimensional: " + labels_path);
  const int64_t n = imgs.dims[0];
  if (static_cast<int64_t>(labs.dims[0]) != n)
    throw std::runtime_error("IDX image/label count mismatch: " + images_path);
  int64_t c = 1, H, W;
  if (imgs.dims.size() == 4) {
    c = imgs.dims[1];
    H = imgs.dims[2];
    W = imgs.dims[3];
  } else {
    H = imgs.dims[1];
    W = imgs.dims[2];
  }
  Dataset ds;
  ds.images = Tensor::zeros({n, c, H, W});
  float* p = ds.images.data();
  for (int64_t i = 0; i < ds.images.size(); ++i)
    p[i] = static_cast<float>(imgs.data[static_cast<size_t>(i)]) / 255.0f;
  ds.labels.resize(static_cast<size_t>(n));
  int maxLabel = 0;
  for (int64_t i = 0; i < n; ++i) {
    ds.labels[static_cast<size_t>(i)] = labs.data[static_cast<size_t>(i)];
    maxLabel = std::max(maxLabel, static_cast<int>(labs.data[static_cast<size_t>(i)]));
  }
  ds.class_count = maxLabel + 1;
  ds.name = images_path;
  return ds;
}

void write_idx_images(const std::string& path, const Tensor& images) {
  require(images.ndim() == 3 || images.ndim() == 4,
          "write_idx_images: expected (N,H,W) or (N,C,H,W)");
  std::vector<unsigned char> out;
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x08);
  out.push_back(static_cast<unsigned char>(images.ndim()));
  for (int i = 0; i < images.ndim(); ++i)
    put_be32(out, static_cast<uint32_t>(images.dim(i)));
  const float* p = images.data();
  for (int64_t i = 0; i < images.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, p[i]));
    out.push_back(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::vector<unsigned char> out;
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x08);
  out.push_back(1);
  put_be32(out, static_cast<uint32_t>(labels.size()));
  for (int v : labels) {
    require(v >= 0 && v <= 255, "write_idx_labels: label out of byte range");
    out.push_back(static_cast<unsigned char>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

// ---- CIFAR binary -----------------------------------------------------------

Dataset load_cifar_bin(const std::string& path, CifarVariant variant) {
  auto bytes = read_file(path);
  const size_t label_bytes = variant == CifarVariant::kCifar10 ? 1 : 2;
  const size_t record = label_bytes + 3072;
  if (bytes.empty() || bytes.size() % record != 0)
    throw std::runtime_error("CIFAR file length is not a multiple of the record size: " + path);
  const int64_t n = static_cast<int64_t>(bytes.size() / record);
  Dataset ds;
  ds.images = Tensor::zeros({n, 3, 32, 32});
  ds.labels.resize(static_cast<size_t>(n));
  float* img = ds.images.data();
  for (int64_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + static_cast<size_t>(i) * record;
    switch (variant) {
      case CifarVariant::kCifar10: ds.labels[static_cast<size_t>(i)] = rec[0]; break;
      case CifarVariant::kCifar100Coarse: ds.labels[static_cast<size_t>(i)] = rec[0]; break;
      case CifarVariant::kCifar100Fine: ds.labels[static_cast<size_t>(i)] = rec[1]; break;
    }
    const unsigned char* px = rec + label_bytes;
    float* dst = img + i * 3072;
    for (int t = 0; t < 3072; ++t) dst[t] = static_cast<float>(px[t]) / 255.0f;
  }
  ds.class_count = variant == CifarVariant::kCifar10 ? 10
                   : variant == CifarVariant::kCifar100Fine ? 100 : 20;
  ds.name = path;
  return ds;
}

Dataset concat_datasets(const std::vector<Dataset>& parts) {
  require(!parts.empty(), "concat_datasets: nothing to concatenate");
  int64_t n = 0;
  for (const auto& p : parts) n += p.images.dim(0);
  std::vector<int64_t> shape = parts[0].images.shape();
  shape[0] = n;
  Dataset out;
  out.images = Tensor::zeros(shape);
  out.class_count = parts[0].class_count;
  out.name = parts[0].name;
  float* dst = out.images.data();
  for (const auto& p : parts) {
    require(p.images.shape().size() == shape.size(), "concat_datasets: rank mismatch");
    std::memcpy(dst, p.images.data(), sizeof(float) * static_cast<size_t>(p.images.size()));
    dst += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

// ---- synthetic shapes ----------------------------------------------------------

namespace {

// coverage test for one supersample point, per class shape
bool inside_shape(int cls, double x, double y, double cx, double cy, double scale) {
  const double dx = x - cx, dy = y - cy;
  switch (cls) {
    case 0: {  // disk
      const double r = 0.26 * scale;
      return dx * dx + dy * dy <= r * r;
    }
    case 1: {  // axis-aligned square
      const double a = 0.23 * scale;
      return std::abs(dx) <= a && std::abs(dy) <= a;
    }
    case 2: {  // cross of two bars
      const double w = 0.085 * scale, l = 0.33 * scale;
      return (std::abs(dx) <= w && std::abs(dy) <= l) ||
             (std::abs(dy) <= w && std::abs(dx) <= l);
    }
    default: {  // upright triangle
      const double r = 0.31 * scale;
      const double ax = 0.0, ay = -r;
      const double bx = r * 0.8660254037844386, by = r * 0.5;
      const double cx2 = -bx, cy2 = by;
      auto side = [&](double px, double py, double qx, double qy) {
        return (qx - px) * (dy - py) - (qy - py) * (dx - px);
      };
      const double s1 = side(ax, ay, bx, by);
      const double s2 = side(bx, by, cx2, cy2);
      const double s3 = side(cx2, cy2, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
  }
}

}  // namespace

Dataset gen_synthetic(int classes, int per_class, int size, uint64_t seed) {
  require(classes >= 2 && classes <= 4, "gen_synthetic: 2..4 classes supported");
  require(per_class >= 1 && size >= 8, "gen_synthetic: bad geometry");
  const int64_t n = static_cast<int64_t>(classes) * per_class;
  Dataset ds;
  ds.images = Tensor::zeros({n, 1, size, size});
  ds.labels.resize(static_cast<size_t>(n));
  ds.class_count = classes;
  ds.name = "synthetic";
  Rng rng(seed);
  const int ss = 4;  // supersampling grid per pixel
  float* img = ds.images.data();
  for (int64_t idx = 0; idx < n; ++idx) {
    const int cls = static_cast<int>(idx % classes);
    ds.labels[static_cast<size_t>(idx)] = cls;
    const double cx = size / 2.0 + uniform_double(rng, -1.5, 1.5);
    const double cy = size / 2.0 + uniform_double(rng, -1.5, 1.5);
    const double scale = size * uniform_double(rng, 0.9, 1.1);
    float* px = img + idx * size * size;
    for (int i = 0; i < size; ++i) {
      for (int j = 0; j < size; ++j) {
        int hit = 0;
        for (int a = 0; a < ss; ++a) {
          for (int b = 0; b < ss; ++b) {
            const double y = i + (a + 0.5) / ss;
            const double x = j + (b + 0.5) / ss;
            if (inside_shape(cls, x, y, cx, cy, scale)) ++hit;
          }
        }
        px[i * size + j] = static_cast<float>(hit) / (ss * ss);
      }
    }
  }
  return ds;
}

// ---- geometric transforms --------------------------------------------------------

Tensor apply_transform(const Tensor& img, const TransformSpec& spec, Rng& rng,
                       TransformSample* sample) {
  require(img.ndim() == 3, "apply_transform: image must be (c, H, W)");
  require(spec.rot_lo <= spec.rot_hi, "apply_transform: empty rotation range");
  require(spec.max_translation >= 0, "apply_transform: negative translation extent");
  const int C = static_cast<int>(img.dim(0));
  const int H = static_cast<int>(img.dim(1));
  const int W = static_cast<int>(img.dim(2));

  TransformSample s;
  if (spec.max_translation > 0) {
    s.du = static_cast<int>(uniform_int(rng, -spec.max_translation, spec.max_translation));
    s.dv = static_cast<int>(uniform_int(rng, -spec.max_translation, spec.max_translation));
  }
  if (spec.rot_lo != spec.rot_hi) {
    s.angle_deg = static_cast<float>(
        uniform_double(rng, static_cast<double>(spec.rot_lo), static_cast<double>(spec.rot_hi)));
  } else {
    s.angle_deg = spec.rot_lo;
  }
  if (sample) *sample = s;
  if (s.du == 0 && s.dv == 0 && s.angle_deg == 0.0f) return img.clone();

  // out(x) = img(R(-theta)(x - c) + c - t): translate first, then rotate
  // about the image centre.
  Tensor out = Tensor::full({C, H, W}, spec.fill);
  const double theta = static_cast<double>(s.angle_deg) * M_PI / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const double cu = (H - 1) / 2.0, cv = (W - 1) / 2.0;
  const float* src = img.data();
  float* dst = out.data();
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const double du_ = i - cu, dv_ = j - cv;
      // R(-theta) on (row, col) vectors
      const double su = cu + ct * du_ + st * dv_ - s.du;
      const double sv = cv - st * du_ + ct * dv_ - s.dv;
      if (spec.interpolation == TransformSpec::Interp::kNearest) {
        const long ui = std::lround(su), vi = std::lround(sv);
        for (int c = 0; c < C; ++c) {
          float v = spec.fill;
          if (ui >= 0 && ui < H && vi >= 0 && vi < W)
            v = src[(static_cast<int64_t>(c) * H + ui) * W + vi];
          dst[(static_cast<int64_t>(c) * H + i) * W + j] = v;
        }
      } else {
        const int u0 = static_cast<int>(std::floor(su));
        const int v0 = static_cast<int>(std::floor(sv));
        const double fu = su - u0, fv = sv - v0;
        for (int c = 0; c < C; ++c) {
          auto tap = [&](int u, int v) -> double {
            if (u < 0 || u >= H || v < 0 || v >= W) return spec.fill;
            return src[(static_cast<int64_t>(c) * H + u) * W + v];
          };
          const double val = (1 - fu) * (1 - fv) * tap(u0, v0) +
                             (1 - fu) * fv * tap(u0, v0 + 1) +
                             fu * (1 - fv) * tap(u0 + 1, v0) +
                             fu * fv * tap(u0 + 1, v0 + 1);
          dst[(static_cast<int64_t>(c) * H + i) * W + j] = static_cast<float>(val);
        }
      }
    }
  }
  return out;
}

TestSuiteSpec TestSuiteSpec::standard() {
  TestSuiteSpec s;
  s.levels[0] = TransformSpec{};  // identity
  const float ranges[4] = {30.0f, 60.0f, 90.0f, 180.0f};
  for (int i = 1; i < 5; ++i) {
    s.levels[static_cast<size_t>(i)].max_translation = 2;
    s.levels[static_cast<size_t>(i)].rot_lo = -ranges[i - 1];
    s.levels[static_cast<size_t>(i)].rot_hi = ranges[i - 1];
    s.levels[static_cast<size_t>(i)].interpolation = TransformSpec::Interp::kBilinear;
  }
  return s;
}

Tensor slice_image(const Tensor& images, int64_t idx) {
  const int64_t c = images.dim(1), H = images.dim(2), W = images.dim(3);
  Tensor out = Tensor::zeros({c, H, W});
  std::memcpy(out.data(), images.data() + idx * c * H * W,
              sizeof(float) * static_cast<size_t>(c * H * W));
  return out;
}

Dataset transform_dataset(const Dataset& base, const TransformSpec& spec, Rng& rng) {
  Dataset out;
  out.labels = base.labels;
  out.class_count = base.class_count;
  out.name = base.name;
  out.images = Tensor::zeros(base.images.shape());
  const int64_t n = base.images.dim(0);
  const int64_t block = base.images.size() / n;
  for (int64_t i = 0; i < n; ++i) {
    Tensor t = apply_transform(slice_image(base.images, i), spec, rng);
    std::memcpy(out.images.data() + i * block, t.data(),
                sizeof(float) * static_cast<size_t>(block));
  }
  return out;
}

std::array<Dataset, 5> make_test_suites(
    const Dataset& base, const TestSuiteSpec& spec, uint64_t seed,
    std::array<std::vector<TransformSample>, 5>* samples) {
  std::array<Dataset, 5> out;
  for (int level = 0; level < 5; ++level) {
    const TransformSpec& ts = spec.levels[static_cast<size_t>(level)];
    Dataset d;
    d.labels = base.labels;
    d.class_count = base.class_count;
    d.name = base.name + "/suite" + std::to_string(level + 1);
    if (level == 0) {
      d.images = base.images.clone();
      if (samples) (*samples)[0].assign(base.labels.size(), TransformSample{});
    } else {
      Rng rng(seed + static_cast<uint64_t>(level) * 0x9e3779b97f4a7c15ull);
      d.images = Tensor::zeros(base.images.shape());
      const int64_t n = base.images.dim(0);
      const int64_t block = base.images.size() / n;
      if (samples) (*samples)[static_cast<size_t>(level)].resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        TransformSample sm;
        Tensor t = apply_transform(slice_image(base.images, i), ts, rng, &sm);
        if (samples) (*samples)[static_cast<size_t>(level)][static_cast<size_t>(i)] = sm;
        std::memcpy(d.images.data() + i * block, t.data(),
                    sizeof(float) * static_cast<size_t>(block));
      }
    }
    out[static_cast<size_t>(level)] = std::move(d);
  }
  return out;
}

}  // namespace icr
