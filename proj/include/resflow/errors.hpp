#pragma once

#include <stdexcept>
#include <string>

namespace resflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent model input. Carries the offending node and field
// so CLI diagnostics can point at the manifest entry.
class ModelError : public Error {
 public:
  ModelError(std::string node, std::string field, const std::string& what)
      : Error("node '" + node + "', field '" + field + "': " + what),
        node_(std::move(node)),
        field_(std::move(field)) {}

  const std::string& node() const { return node_; }
  const std::string& field() const { return field_; }

 private:
  std::string node_;
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PlanningError : public Error {
 public:
  using Error::Error;
};

class InfeasibleBudget : public PlanningError {
 public:
  using PlanningError::PlanningError;
};

class UnsupportedTopology : public Error {
 public:
  using Error::Error;
};

}  // namespace resflow
