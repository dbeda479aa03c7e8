#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "msadnet/image.hpp"

namespace msad {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset manifests. Two on-disk layouts are recognized:
//   root/<class>/*.pgm                        (directoryTree)
//   root/{train,valid,test}/<class>/*.pgm     (preSplitTree)
// Class ordering is the sorted directory-name order; manifests can also be
// read back from the JSON written by the synthetic generator.
// ---------------------------------------------------------------------------

enum class Partition { Unassigned, Train, Valid, Test };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Unassigned: return "none";
    case Partition::Train: return "train";
    case Partition::Valid: return "valid";
    case Partition::Test: return "test";
  }
  return "?";
}

inline Partition partition_from(const std::string& s) {
  if (s == "train") return Partition::Train;
  if (s == "valid") return Partition::Valid;
  if (s == "test") return Partition::Test;
  if (s == "none") return Partition::Unassigned;
  throw ParseError(str("manifest: unknown partition tag '", s, "'"));
}

enum class DatasetSource { DirectoryTree, PreSplitTree, Synthetic };

struct SampleRecord {
  std::string path;
  int class_index = 0;
  Partition partition = Partition::Unassigned;
  int quadrant = -1;  // synthetic sets record where the structure was placed
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<SampleRecord> samples;
  DatasetSource source = DatasetSource::DirectoryTree;

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.class_index);
    return out;
  }
};

namespace detail {

inline bool is_pnm_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

inline std::vector<std::string> sorted_subdirs(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<std::string> sorted_images(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_pnm_file(e.path()))
      out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline DatasetManifest scan_dataset(const std::string& root) {
  const fs::path rootp(root);
  if (!fs::is_directory(rootp))
    throw IoError(str("scan_dataset: '", root, "' is not a directory"));
  auto subdirs = detail::sorted_subdirs(rootp);
  if (subdirs.empty())
    throw IoError(str("scan_dataset: '", root, "' holds no class directories"));

  const bool pre_split =
      std::count(subdirs.begin(), subdirs.end(), "train") &&
      std::count(subdirs.begin(), subdirs.end(), "valid") &&
      std::count(subdirs.begin(), subdirs.end(), "test");

  DatasetManifest m;
  if (pre_split) {
    m.source = DatasetSource::PreSplitTree;
    m.class_names = detail::sorted_subdirs(rootp / "train");
    if (m.class_names.empty())
      throw IoError(str("scan_dataset: '", root, "/train' holds no class directories"));
    const std::pair<const char*, Partition> parts[3] = {
        {"train", Partition::Train}, {"valid", Partition::Valid}, {"test", Partition::Test}};
    for (const auto& [dir, tag] : parts) {
      for (std::size_t c = 0; c < m.class_names.size(); ++c) {
        const fs::path cdir = rootp / dir / m.class_names[c];
        if (!fs::is_directory(cdir)) continue;  // a class may be absent from a partition
        auto files = detail::sorted_images(cdir);
        for (auto& f : files)
          m.samples.push_back({f, static_cast<int>(c), tag, -1});
      }
    }
    for (std::size_t c = 0; c < m.class_names.size(); ++c) {
      const bool any = std::any_of(m.samples.begin(), m.samples.end(), [&](const auto& s) {
        return s.class_index == static_cast<int>(c);
      });
      if (!any)
        throw IoError(str("scan_dataset: class '", m.class_names[c], "' has no images"));
    }
  } else {
    m.source = DatasetSource::DirectoryTree;
    m.class_names = subdirs;
    for (std::size_t c = 0; c < subdirs.size(); ++c) {
      auto files = detail::sorted_images(rootp / subdirs[c]);
      if (files.empty())
        throw IoError(str("scan_dataset: class directory '", subdirs[c],
                          "' holds no images"));
      for (auto& f : files)
        m.samples.push_back({f, static_cast<int>(c), Partition::Unassigned, -1});
    }
  }
  if (m.samples.empty())
    throw IoError(str("scan_dataset: no images found under '", root, "'"));
  return m;
}

inline nlohmann::json manifest_json(const DatasetManifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : m.samples) {
    nlohmann::json e{{"path", s.path},
                     {"class", s.class_index},
                     {"partition", partition_name(s.partition)}};
    if (s.quadrant >= 0) e["quadrant"] = s.quadrant;
    samples.push_back(std::move(e));
  }
  const char* src = m.source == DatasetSource::Synthetic      ? "synthetic"
                    : m.source == DatasetSource::PreSplitTree ? "preSplitTree"
                                                              : "directoryTree";
  return nlohmann::json{
      {"classes", m.class_names}, {"source", src}, {"samples", samples}};
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(str("manifest: cannot open '", path, "' for writing"));
  os << manifest_json(m).dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(str("manifest: cannot open '", path, "'"));
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(str("manifest: '", path, "' is not valid JSON: ", e.what()));
  }
  DatasetManifest m;
  try {
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    const std::string src = j.at("source").get<std::string>();
    m.source = src == "synthetic"      ? DatasetSource::Synthetic
               : src == "preSplitTree" ? DatasetSource::PreSplitTree
                                       : DatasetSource::DirectoryTree;
    for (const auto& e : j.at("samples")) {
      SampleRecord s;
      s.path = e.at("path").get<std::string>();
      s.class_index = e.at("class").get<int>();
      s.partition = partition_from(e.at("partition").get<std::string>());
      if (e.contains("quadrant")) s.quadrant = e.at("quadrant").get<int>();
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(str("manifest: '", path, "' is malformed: ", e.what()));
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory dataset: every sample decoded, resized and scaled once.
// ---------------------------------------------------------------------------

template <typename T>
struct LoadedDataset {
  std::vector<std::vector<T>> images;  // CHW planes, channels*size*size each
  std::vector<int> labels;
  std::vector<Partition> partitions;
  std::vector<int> quadrants;
  std::vector<std::string> class_names;
  std::size_t channels = 1, size_px = 0;

  std::size_t count() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  Tensor<T> batch(const std::vector<std::size_t>& indices) const {
    Tensor<T> out(Shape{indices.size(), channels, size_px, size_px});
    const std::size_t stride = channels * size_px * size_px;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& img = images.at(indices[i]);
      std::copy(img.begin(), img.end(), out.values().begin() + i * stride);
    }
    return out;
  }

  std::vector<int> batch_labels(const std::vector<std::size_t>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
  }

  std::vector<std::size_t> partition_indices(Partition p) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < partitions.size(); ++i)
      if (partitions[i] == p) out.push_back(i);
    return out;
  }
};

template <typename T>
LoadedDataset<T> load_dataset(const DatasetManifest& m, std::size_t size_px,
                              std::size_t channels) {
  LoadedDataset<T> d;
  d.class_names = m.class_names;
  d.channels = channels;
  d.size_px = size_px;
  d.images.reserve(m.samples.size());
  for (const auto& s : m.samples) {
    ImageBuffer img = load_pnm(s.path);
    if (img.height != size_px || img.width != size_px)
      img = resize_bilinear(img, size_px, size_px);
    d.images.push_back(to_chw<T>(img, channels));
    d.labels.push_back(s.class_index);
    d.partitions.push_back(s.partition);
    d.quadrants.push_back(s.quadrant);
  }
  return d;
}

}  // namespace msad
