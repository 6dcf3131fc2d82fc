#include "csft/domains.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace csft {

namespace {

constexpr int kMaxShapes = 5;
constexpr int kMaxTextures = 5;

struct Rgb {
  double r, g, b;
};

Rgb texture_pixel(int texture_id, int x, int y) {
  switch (texture_id) {
    case 0: return {0.20, 0.30, 0.75};
    case 1: return {0.75, 0.22, 0.20};
    case 2: return {0.22, 0.65, 0.28};
    case 3:  // diagonal stripes
      return ((x + y) / 4) % 2 == 0 ? Rgb{0.78, 0.70, 0.20} : Rgb{0.30, 0.20, 0.60};
    case 4:  // checkerboard
      ((void)0);
      return ((x / 8) + (y / 8)) % 2 == 0 ? Rgb{0.70, 0.28, 0.62} : Rgb{0.18, 0.58, 0.66};
    default:
      throw std::invalid_argument("texture id out of range");
  }
}

bool shape_mask(int shape_id, double dx, double dy, double r) {
  switch (shape_id) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(std::abs(dx), std::abs(dy)) <= 0.88 * r;
    case 2: {  // upward triangle via half-plane tests
      const double ax = 0.0, ay = -r;
      const double bx = -1.05 * r, by = 0.85 * r;
      const double cx = 1.05 * r, cy = 0.85 * r;
      auto side = [](double px, double py, double qx, double qy, double tx, double ty) {
        return (qx - px) * (ty - py) - (qy - py) * (tx - px);
      };
      const double s1 = side(ax, ay, bx, by, dx, dy);
      const double s2 = side(bx, by, cx, cy, dx, dy);
      const double s3 = side(cx, cy, ax, ay, dx, dy);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
    case 3: {  // plus sign
      const double arm = 0.38 * r;
      return (std::abs(dx) <= arm && std::abs(dy) <= r) ||
             (std::abs(dy) <= arm && std::abs(dx) <= r);
    }
    case 4: {  // five-point star: spike profile in polar angle
      const double rho = std::sqrt(dx * dx + dy * dy);
      if (rho < 1e-12) return true;
      const double theta = std::atan2(dy, dx);
      const double period = 2.0 * M_PI / 5.0;
      double t = std::fmod(theta + 2.0 * M_PI, period) / period;  // [0,1)
      const double spike = 1.0 - std::abs(2.0 * t - 1.0);         // 0 at edges, 1 mid
      const double r_in = 0.45 * r, r_out = 1.18 * r;
      return rho <= r_in + (r_out - r_in) * spike;
    }
    default:
      throw std::invalid_argument("shape id out of range");
  }
}

constexpr char kDatasetMagic[8] = {'C', 'S', 'F', 'T', 'D', 'S', '0', '1'};
constexpr uint32_t kDatasetVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("dataset: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_i32_column(std::ostream& os, const std::vector<int>& col) {
  for (int v : col) write_u32(os, static_cast<uint32_t>(v));
}

std::vector<int> read_i32_column(std::istream& is, int n) {
  std::vector<int> col(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) col[static_cast<size_t>(i)] = static_cast<int>(read_u32(is));
  return col;
}

}  // namespace

std::vector<int> CausalGraphParams::resolved_pairing() const {
  if (!pairing.empty()) {
    if (static_cast<int>(pairing.size()) != num_classes)
      throw std::invalid_argument("pairing length must equal num_classes");
    for (int z : pairing)
      if (z < 0 || z >= num_styles_z)
        throw std::invalid_argument("pairing entries must be valid texture ids");
    return pairing;
  }
  std::vector<int> p(static_cast<size_t>(num_classes));
  for (int s = 0; s < num_classes; ++s) p[static_cast<size_t>(s)] = s % num_styles_z;
  return p;
}

std::vector<double> render(int shape_id, int texture_id, double sigma, Rng& rng,
                           int size) {
  if (shape_id < 0 || shape_id >= kMaxShapes)
    throw std::invalid_argument("render: shape id out of range");
  if (texture_id < 0 || texture_id >= kMaxTextures)
    throw std::invalid_argument("render: texture id out of range");
  const double c = (size - 1) / 2.0;
  const double r = 0.30 * size;
  const Rgb fg{0.88, 0.86, 0.82};
  std::vector<double> img(static_cast<size_t>(3) * size * size);
  const size_t plane = static_cast<size_t>(size) * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const Rgb bg = texture_pixel(texture_id, x, y);
      const bool inside = shape_mask(shape_id, x - c, y - c, r);
      const Rgb px = inside ? fg : bg;
      const size_t i = static_cast<size_t>(y) * size + x;
      img[i] = px.r;
      img[plane + i] = px.g;
      img[2 * plane + i] = px.b;
    }
  if (sigma > 0.0) {
    for (double& v : img) v = std::min(1.0, std::max(0.0, v + rng.normal(0.0, sigma)));
  }
  return img;
}

DomainDataset sample_domain(const CausalGraphParams& params, int n) {
  if (n <= 0) throw std::invalid_argument("sample_domain: N must be positive");
  if (params.num_classes > kMaxShapes || params.num_styles_z > kMaxTextures)
    throw std::invalid_argument("sample_domain: class/texture count exceeds palette");
  const auto pairing = params.resolved_pairing();
  Rng rng(params.seed);
  DomainDataset d;
  d.images.reserve(static_cast<size_t>(n) * d.image_numel());
  d.goal_labels.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int s = rng.randint(params.num_classes);
    int z;
    if (rng.uniform() < params.rho || params.num_styles_z == 1) {
      z = pairing[static_cast<size_t>(s)];
    } else {
      z = rng.randint(params.num_styles_z - 1);
      if (z >= pairing[static_cast<size_t>(s)]) ++z;
    }
    const auto img = render(s, z, params.sigma, rng, d.height);
    d.images.insert(d.images.end(), img.begin(), img.end());
    d.goal_labels.push_back(s);
    d.latent_s.push_back(s);
    d.latent_z.push_back(z);
  }
  return d;
}

void split_train_test(const DomainDataset& d, DomainDataset& train, DomainDataset& test) {
  const int n = d.size();
  const int n_train = (n * 8) / 10;
  train = d.subset(0, n_train);
  test = d.subset(n_train, n);
}

DomainDataset DomainDataset::subset(int begin, int end) const {
  if (begin < 0 || end > size() || begin > end)
    throw std::out_of_range("DomainDataset::subset: bad range");
  DomainDataset out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.images.assign(images.begin() + static_cast<ptrdiff_t>(image_numel()) * begin,
                    images.begin() + static_cast<ptrdiff_t>(image_numel()) * end);
  auto slice = [&](const std::vector<int>& col) {
    return col.empty() ? std::vector<int>()
                       : std::vector<int>(col.begin() + begin, col.begin() + end);
  };
  out.goal_labels = slice(goal_labels);
  out.style_labels = slice(style_labels);
  out.latent_s = slice(latent_s);
  out.latent_z = slice(latent_z);
  return out;
}

Tensor DomainDataset::image_batch(const std::vector<int>& indices) const {
  const int b = static_cast<int>(indices.size());
  Tensor t = Tensor::zeros({b, channels, height, width});
  for (int i = 0; i < b; ++i)
    std::copy_n(image_ptr(indices[static_cast<size_t>(i)]), image_numel(),
                t.data().data() + image_numel() * i);
  return t;
}

Tensor DomainDataset::image_batch(int begin, int end) const {
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(end - begin));
  for (int i = begin; i < end; ++i) idx.push_back(i);
  return image_batch(idx);
}

void save_dataset(const std::string& path, const DomainDataset& d,
                  bool include_goal_labels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open " + path + " for writing");
  os.write(kDatasetMagic, 8);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<uint32_t>(d.size()));
  write_u32(os, static_cast<uint32_t>(d.channels));
  write_u32(os, static_cast<uint32_t>(d.height));
  write_u32(os, static_cast<uint32_t>(d.width));
  const bool goal = include_goal_labels && !d.goal_labels.empty();
  const bool style = !d.style_labels.empty();
  const bool latents = !d.latent_s.empty();
  unsigned char flags[4] = {static_cast<unsigned char>(goal),
                            static_cast<unsigned char>(style),
                            static_cast<unsigned char>(latents), 0};
  os.write(reinterpret_cast<const char*>(flags), 4);
  for (double v : d.images) {
    const float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32(os, bits);
  }
  if (goal) write_i32_column(os, d.goal_labels);
  if (style) write_i32_column(os, d.style_labels);
  if (latents) {
    write_i32_column(os, d.latent_s);
    write_i32_column(os, d.latent_z);
  }
  if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

DomainDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw std::runtime_error("dataset: bad magic in " + path);
  if (read_u32(is) != kDatasetVersion)
    throw std::runtime_error("dataset: unsupported version in " + path);
  DomainDataset d;
  const int n = static_cast<int>(read_u32(is));
  d.channels = static_cast<int>(read_u32(is));
  d.height = static_cast<int>(read_u32(is));
  d.width = static_cast<int>(read_u32(is));
  unsigned char flags[4];
  is.read(reinterpret_cast<char*>(flags), 4);
  if (!is) throw std::runtime_error("dataset: truncated header in " + path);
  d.images.resize(static_cast<size_t>(n) * d.image_numel());
  for (double& v : d.images) {
    const uint32_t bits = read_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    v = static_cast<double>(f);
  }
  if (flags[0]) d.goal_labels = read_i32_column(is, n);
  if (flags[1]) d.style_labels = read_i32_column(is, n);
  if (flags[2]) {
    d.latent_s = read_i32_column(is, n);
    d.latent_z = read_i32_column(is, n);
  }
  return d;
}

void save_sidecar(const std::string& dataset_path, const CausalGraphParams& params,
                  const std::string& role, const std::string& split) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["role"] = role;
  j["split"] = split;
  j["params"] = {{"num_classes", params.num_classes},
                 {"num_styles_z", params.num_styles_z},
                 {"rho", params.rho},
                 {"sigma", params.sigma},
                 {"seed", params.seed},
                 {"pairing", params.resolved_pairing()}};
  std::ofstream os(dataset_path + ".json");
  if (!os) throw std::runtime_error("dataset: cannot write sidecar for " + dataset_path);
  os << j.dump(2) << "\n";
}

}  // namespace csft
