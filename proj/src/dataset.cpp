#include "ewa/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ewa {

Dataset::Dataset(std::vector<double> pixels, std::vector<int64_t> labels, int64_t channels,
                 int64_t height, int64_t width, int64_t n_classes)
    : pixels_(std::move(pixels)),
      labels_(std::move(labels)),
      channels_(channels),
      height_(height),
      width_(width),
      n_classes_(n_classes) {
  check_value(!labels_.empty(), "Dataset: no samples");
  check_value(n_classes_ >= 2, "Dataset: need at least two classes");
  const size_t per_image = static_cast<size_t>(channels_ * height_ * width_);
  check_value(pixels_.size() == labels_.size() * per_image,
              "Dataset: pixel buffer does not match sample count");
  for (int64_t l : labels_) {
    check_value(l >= 0 && l < n_classes_,
                "Dataset: label " + std::to_string(l) + " out of range");
  }
}

std::pair<Tensor, std::vector<int64_t>> Dataset::batch(std::span<const int64_t> indices) const {
  check_value(!indices.empty(), "Dataset::batch: empty index list");
  const int64_t per_image = channels_ * height_ * width_;
  Tensor images = Tensor::zeros({static_cast<int64_t>(indices.size()), channels_, height_, width_});
  std::vector<int64_t> labels(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t idx = indices[i];
    check_value(idx >= 0 && idx < size(), "Dataset::batch: index out of range");
    const double* src = pixels_.data() + idx * per_image;
    std::copy(src, src + per_image, images.data().data() + static_cast<int64_t>(i) * per_image);
    labels[i] = labels_[static_cast<size_t>(idx)];
  }
  return {images, std::move(labels)};
}

namespace {

Dataset make_synthetic_split(const SyntheticSpec& spec, int64_t count, const char* stream_name) {
  check_value(count >= 1, "synthetic dataset: split size must be positive");
  check_value(spec.n_classes >= 2 && spec.image_size >= 1 && spec.channels >= 1,
              "synthetic dataset: bad spec");
  const int64_t per_image = spec.channels * spec.image_size * spec.image_size;

  // class patterns are fixed by the generator seed alone
  Rng pattern_rng = Rng::stream(spec.generator_seed, "synthetic.patterns");
  std::vector<double> patterns(static_cast<size_t>(spec.n_classes * per_image));
  for (double& v : patterns) v = pattern_rng.normal();
  if (spec.shift != 0.0) {
    Rng shift_rng = Rng::stream(spec.generator_seed, "synthetic.shift");
    for (double& v : patterns) v += spec.shift * shift_rng.normal();
  }

  Rng rng = Rng::stream(spec.generator_seed, stream_name);
  std::vector<double> pixels(static_cast<size_t>(count * per_image));
  std::vector<int64_t> labels(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    const int64_t c = i % spec.n_classes;  // class-balanced by construction
    labels[static_cast<size_t>(i)] = c;
    const double* pat = patterns.data() + c * per_image;
    double* dst = pixels.data() + i * per_image;
    for (int64_t p = 0; p < per_image; ++p) dst[p] = pat[p] + spec.noise * rng.normal();
  }
  return Dataset(std::move(pixels), std::move(labels), spec.channels, spec.image_size,
                 spec.image_size, spec.n_classes);
}

// ----- idx files -----

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

uint32_t read_u32be(const std::vector<uint8_t>& b, size_t off, const std::string& path) {
  if (off + 4 > b.size()) {
    throw ParseError(path + ": truncated at byte " + std::to_string(b.size()) +
                     ", needed 4 bytes at offset " + std::to_string(off));
  }
  return (static_cast<uint32_t>(b[off]) << 24) | (static_cast<uint32_t>(b[off + 1]) << 16) |
         (static_cast<uint32_t>(b[off + 2]) << 8) | static_cast<uint32_t>(b[off + 3]);
}

// Header: two zero bytes, a dtype code (0x08 = unsigned byte), a rank byte,
// then rank big-endian u32 dimensions, then the payload.
std::pair<std::vector<int64_t>, size_t> parse_idx_header(const std::vector<uint8_t>& b,
                                                         const std::string& path,
                                                         int expected_rank) {
  if (b.size() < 4) throw ParseError(path + ": truncated at byte " + std::to_string(b.size()));
  if (b[0] != 0 || b[1] != 0) {
    throw ParseError(path + ": bad magic at byte 0 (not an idx file)");
  }
  if (b[2] != 0x08) {
    throw ParseError(path + ": unsupported dtype code at byte 2 (only unsigned byte, 0x08)");
  }
  const int rank = b[3];
  if (rank != expected_rank) {
    throw ParseError(path + ": rank " + std::to_string(rank) + " at byte 3, expected " +
                     std::to_string(expected_rank));
  }
  std::vector<int64_t> dims(static_cast<size_t>(rank));
  size_t off = 4;
  for (int i = 0; i < rank; ++i) {
    dims[static_cast<size_t>(i)] = read_u32be(b, off, path);
    off += 4;
  }
  int64_t total = 1;
  for (int64_t d : dims) total *= d;
  if (b.size() - off != static_cast<size_t>(total)) {
    throw ParseError(path + ": payload has " + std::to_string(b.size() - off) +
                     " bytes at offset " + std::to_string(off) + ", header promises " +
                     std::to_string(total));
  }
  return {dims, off};
}

Dataset load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  const std::vector<uint8_t> ib = read_file(images_path);
  const auto [idims, ioff] = parse_idx_header(ib, images_path, 3);
  const int64_t n = idims[0], h = idims[1], w = idims[2];

  const std::vector<uint8_t> lb = read_file(labels_path);
  const auto [ldims, loff] = parse_idx_header(lb, labels_path, 1);
  if (ldims[0] != n) {
    throw ParseError(labels_path + ": " + std::to_string(ldims[0]) + " labels for " +
                     std::to_string(n) + " images");
  }

  std::vector<double> pixels(static_cast<size_t>(n * h * w));
  for (size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<double>(ib[ioff + i]) / 255.0;
  }
  std::vector<int64_t> labels(static_cast<size_t>(n));
  int64_t max_label = 0;
  for (int64_t i = 0; i < n; ++i) {
    labels[static_cast<size_t>(i)] = lb[loff + static_cast<size_t>(i)];
    max_label = std::max(max_label, labels[static_cast<size_t>(i)]);
  }
  return Dataset(std::move(pixels), std::move(labels), 1, h, w, std::max<int64_t>(2, max_label + 1));
}

// ----- csv files: label,pixel,pixel,... one sample per line -----

Dataset load_csv(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  const std::string text(bytes.begin(), bytes.end());

  std::vector<double> pixels;
  std::vector<int64_t> labels;
  int64_t per_image = -1;
  size_t pos = 0;
  int64_t line_no = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    ++line_no;
    std::string_view line(text.data() + pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) {
      std::vector<double> row;
      size_t field_start = 0;
      while (field_start <= line.size()) {
        size_t comma = line.find(',', field_start);
        if (comma == std::string::npos) comma = line.size();
        const std::string_view field = line.substr(field_start, comma - field_start);
        double value = 0.0;
        const auto res =
            std::from_chars(field.data(), field.data() + field.size(), value);
        if (res.ec != std::errc{} || res.ptr != field.data() + field.size()) {
          throw ParseError(path + ": line " + std::to_string(line_no) + ", byte offset " +
                           std::to_string(pos + field_start) + ": bad number '" +
                           std::string(field) + "'");
        }
        row.push_back(value);
        if (comma == line.size()) break;
        field_start = comma + 1;
      }
      if (row.size() < 2) {
        throw ParseError(path + ": line " + std::to_string(line_no) +
                         ": need a label and at least one pixel");
      }
      const double label_val = row[0];
      if (label_val < 0 || label_val != std::floor(label_val)) {
        throw ParseError(path + ": line " + std::to_string(line_no) +
                         ": label must be a non-negative integer");
      }
      const int64_t this_count = static_cast<int64_t>(row.size()) - 1;
      if (per_image < 0) {
        per_image = this_count;
      } else if (per_image != this_count) {
        throw ParseError(path + ": line " + std::to_string(line_no) + ": " +
                         std::to_string(this_count) + " pixels, earlier lines had " +
                         std::to_string(per_image));
      }
      labels.push_back(static_cast<int64_t>(label_val));
      pixels.insert(pixels.end(), row.begin() + 1, row.end());
    }
    pos = eol + 1;
  }
  if (labels.empty()) throw ParseError(path + ": no samples");

  // infer layout: 3 channels if count is 3*s^2, else 1 channel if s^2
  int64_t channels = 0, side = 0;
  const auto try_square = [&](int64_t c) {
    if (per_image % c != 0) return false;
    const int64_t s = static_cast<int64_t>(std::llround(std::sqrt(
        static_cast<double>(per_image / c))));
    if (s * s != per_image / c) return false;
    channels = c;
    side = s;
    return true;
  };
  if (!try_square(3) && !try_square(1)) {
    throw ParseError(path + ": cannot infer image shape from " + std::to_string(per_image) +
                     " pixels per row (expected 3*s*s or s*s)");
  }
  int64_t max_label = 0;
  for (int64_t l : labels) max_label = std::max(max_label, l);
  return Dataset(std::move(pixels), std::move(labels), channels, side, side,
                 std::max<int64_t>(2, max_label + 1));
}

}  // namespace

DataSplits load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "synthetic") {
    DataSplits s{make_synthetic_split(spec.synthetic, spec.synthetic.n_train, "synthetic.train"),
                 std::nullopt};
    if (spec.synthetic.n_eval > 0) {
      s.eval = make_synthetic_split(spec.synthetic, spec.synthetic.n_eval, "synthetic.eval");
    }
    return s;
  }
  if (spec.kind == "idx") {
    check_value(!spec.images_path.empty() && !spec.labels_path.empty(),
                "dataset: idx kind needs images and labels paths");
    DataSplits s{load_idx_pair(spec.images_path, spec.labels_path), std::nullopt};
    if (!spec.eval_images_path.empty()) {
      check_value(!spec.eval_labels_path.empty(), "dataset: eval images without eval labels");
      s.eval = load_idx_pair(spec.eval_images_path, spec.eval_labels_path);
    }
    return s;
  }
  if (spec.kind == "csv") {
    check_value(!spec.csv_path.empty(), "dataset: csv kind needs a path");
    DataSplits s{load_csv(spec.csv_path), std::nullopt};
    if (!spec.eval_csv_path.empty()) s.eval = load_csv(spec.eval_csv_path);
    return s;
  }
  throw ValueError("dataset: unknown kind '" + spec.kind + "'");
}

DatasetSpec parse_dataset_arg(const std::string& arg) {
  DatasetSpec spec;
  const size_t colon = arg.find(':');
  const std::string kind = arg.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : arg.substr(colon + 1);
  if (kind == "synthetic") {
    spec.kind = "synthetic";
    if (rest.empty()) return spec;
    std::istringstream ss(rest);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const size_t eq = item.find('=');
      if (eq == std::string::npos) {
        throw ParseError("dataset arg: expected key=value, got '" + item + "'");
      }
      const std::string key = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      try {
        if (key == "n") spec.synthetic.n_train = std::stoll(value);
        else if (key == "n_eval") spec.synthetic.n_eval = std::stoll(value);
        else if (key == "classes") spec.synthetic.n_classes = std::stoll(value);
        else if (key == "size") spec.synthetic.image_size = std::stoll(value);
        else if (key == "channels") spec.synthetic.channels = std::stoll(value);
        else if (key == "seed") spec.synthetic.generator_seed = std::stoull(value);
        else if (key == "noise") spec.synthetic.noise = std::stod(value);
        else if (key == "shift") spec.synthetic.shift = std::stod(value);
        else throw ParseError("dataset arg: unknown key '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw ParseError("dataset arg: bad value for '" + key + "': '" + value + "'");
      }
    }
    return spec;
  }
  std::vector<std::string> parts;
  std::istringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(item);
  if (kind == "idx") {
    spec.kind = "idx";
    check_value(parts.size() == 2 || parts.size() == 4,
                "dataset arg: idx needs IMAGES,LABELS[,EVAL_IMAGES,EVAL_LABELS]");
    spec.images_path = parts[0];
    spec.labels_path = parts[1];
    if (parts.size() == 4) {
      spec.eval_images_path = parts[2];
      spec.eval_labels_path = parts[3];
    }
    return spec;
  }
  if (kind == "csv") {
    spec.kind = "csv";
    check_value(parts.size() == 1 || parts.size() == 2, "dataset arg: csv needs TRAIN[,EVAL]");
    spec.csv_path = parts[0];
    if (parts.size() == 2) spec.eval_csv_path = parts[1];
    return spec;
  }
  throw ParseError("dataset arg: unknown kind '" + kind + "'");
}

}  // namespace ewa
