#pragma once

#include <stdexcept>
#include <string>

namespace etegrec {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or empty input files.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Filtering that leaves nothing behind.
class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Embedding table missing rows for corpus items.
class CoverageError : public Error {
 public:
  using Error::Error;
};

// Too many items share one token prefix for the suffix vocabulary.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Identifier map produced by a different tokenizer than the one supplied.
class StalenessError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or parameters during optimisation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace etegrec
