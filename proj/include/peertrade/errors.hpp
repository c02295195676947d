#pragma once
#include <cstddef>
#include <stdexcept>
#include <string>

namespace peertrade {

class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

// Malformed shapes: vector lengths, indices, budgets larger than the population.
class StructuralError : public Error
{
public:
    using Error::Error;
};

class ConfigError : public Error
{
public:
    using Error::Error;
};

// A model invariant does not hold. `invariant()` names the violated rule.
class InvariantError : public Error
{
public:
    InvariantError(std::string invariant, const std::string& detail)
        : Error(invariant + ": " + detail), invariant_(std::move(invariant))
    {}

    const std::string& invariant() const noexcept { return invariant_; }

private:
    std::string invariant_;
};

// Text input that could not be parsed. Rows and columns are 1-based; 0 means unknown.
class ParseError : public Error
{
public:
    ParseError(const std::string& what, std::size_t row = 0, std::size_t column = 0)
        : Error(format(what, row, column)), row_(row), column_(column)
    {}

    std::size_t row() const noexcept { return row_; }
    std::size_t column() const noexcept { return column_; }

private:
    static std::string format(const std::string& what, std::size_t row, std::size_t column)
    {
        if (row == 0) return what;
        std::string s = "row " + std::to_string(row);
        if (column != 0) s += ", column " + std::to_string(column);
        return s + ": " + what;
    }

    std::size_t row_;
    std::size_t column_;
};

class SolverError : public Error
{
public:
    using Error::Error;
};

} // namespace peertrade
