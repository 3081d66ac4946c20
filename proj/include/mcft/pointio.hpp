#pragma once

#include <string>
#include <vector>

#include "mcft/pointcloud.hpp"

namespace mcft {

enum class PointFileFormat { xyz_ascii, off, ply_ascii };

PointFileFormat point_format_from_name(const std::string& name);

/// Reads vertices only; faces are ignored; no resampling. Malformed content
/// raises parse_error naming the offending line.
PointCloud load_point_file(const std::string& path, PointFileFormat format);

void save_xyz(const std::string& path, const PointCloud& cloud);

/// A labeled collection with designated train/test partitions.
struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<int> train_indices;
  std::vector<int> test_indices;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

/// Two independent draws (train and test) from the same synthetic spec.
Dataset make_synthetic_dataset(const SyntheticSpec& spec, int train_per_class,
                               int test_per_class);

/// Writes <dir>/{train,test}/ as directories of .xyz files plus a labels.csv
/// ("id,label,class_name") per split, and a dataset.json with the catalog.
void export_dataset(const std::string& dir, const Dataset& ds);
Dataset import_dataset(const std::string& dir);

}  // namespace mcft
