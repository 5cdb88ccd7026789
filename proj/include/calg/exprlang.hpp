#pragma once

// Boolean expressions over named primitives: parsing, printing, post-order
// traversal, truth evaluation, NNF/CNF conversion and random generation.
//
// Concrete syntax (whitespace-insensitive, operator words case-insensitive):
//
//   expr    := conj ( ('|' | OR) conj )*
//   conj    := unary ( ('&' | AND) unary )*
//   unary   := ('!' | NOT) unary | atom
//   atom    := IDENT | '(' expr ')'
//   IDENT   := [A-Za-z_][A-Za-z0-9_]*
//
// Chains such as "A & B & C" become left-nested binary nodes.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calg/errors.hpp"
#include "calg/numcore.hpp"

namespace calg {

enum class Op { Primitive, Not, And, Or };

/// Immutable boolean expression tree. Copies share structure.
class Expression {
 public:
  struct Node {
    Op op;
    std::string name;  // Primitive only
    std::shared_ptr<const Node> left;   // Not: the child
    std::shared_ptr<const Node> right;  // And/Or only
  };

  static Expression primitive(std::string name) {
    if (!is_identifier(name)) {
      throw Error(ErrorCode::Syntax, "invalid primitive name '" + name + "'");
    }
    return Expression(std::make_shared<const Node>(Node{Op::Primitive, std::move(name), nullptr, nullptr}));
  }
  static Expression negation(const Expression& child) {
    return Expression(std::make_shared<const Node>(Node{Op::Not, {}, child.node_, nullptr}));
  }
  static Expression conjunction(const Expression& l, const Expression& r) {
    return Expression(std::make_shared<const Node>(Node{Op::And, {}, l.node_, r.node_}));
  }
  static Expression disjunction(const Expression& l, const Expression& r) {
    return Expression(std::make_shared<const Node>(Node{Op::Or, {}, l.node_, r.node_}));
  }
  static Expression binary(Op op, const Expression& l, const Expression& r) {
    return op == Op::And ? conjunction(l, r) : disjunction(l, r);
  }

  Op op() const { return node_->op; }
  bool is_primitive() const { return node_->op == Op::Primitive; }
  const std::string& name() const { return node_->name; }
  /// Only child of Not, left child of And/Or.
  Expression left() const { return Expression(node_->left); }
  Expression right() const { return Expression(node_->right); }
  Expression child() const { return left(); }

  const Node* node() const { return node_.get(); }

  std::size_t node_count() const {
    switch (op()) {
      case Op::Primitive: return 1;
      case Op::Not: return 1 + child().node_count();
      default: return 1 + left().node_count() + right().node_count();
    }
  }

  std::size_t depth() const {
    switch (op()) {
      case Op::Primitive: return 0;
      case Op::Not: return 1 + child().depth();
      default: return 1 + std::max(left().depth(), right().depth());
    }
  }

  /// Distinct primitive names, sorted.
  std::vector<std::string> primitives() const {
    std::set<std::string> names;
    collect(node_.get(), names);
    return {names.begin(), names.end()};
  }

  friend bool operator==(const Expression& a, const Expression& b) {
    return equal(a.node_.get(), b.node_.get());
  }

  static bool is_identifier(std::string_view s) {
    if (s.empty()) return false;
    auto head = static_cast<unsigned char>(s[0]);
    if (!(std::isalpha(head) || s[0] == '_')) return false;
    return std::all_of(s.begin() + 1, s.end(), [](char c) {
      auto u = static_cast<unsigned char>(c);
      return std::isalnum(u) || c == '_';
    });
  }

 private:
  explicit Expression(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  static void collect(const Node* n, std::set<std::string>& out) {
    if (n->op == Op::Primitive) {
      out.insert(n->name);
      return;
    }
    collect(n->left.get(), out);
    if (n->right) collect(n->right.get(), out);
  }

  static bool equal(const Node* a, const Node* b) {
    if (a == b) return true;
    if (a->op != b->op) return false;
    switch (a->op) {
      case Op::Primitive: return a->name == b->name;
      case Op::Not: return equal(a->left.get(), b->left.get());
      default:
        return equal(a->left.get(), b->left.get()) && equal(a->right.get(), b->right.get());
    }
  }

  std::shared_ptr<const Node> node_;
};

using Assignment = std::map<std::string, bool, std::less<>>;

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

enum class Tok { Ident, Not, And, Or, LParen, RParen, End };

struct Token {
  Tok kind;
  std::string text;
  std::size_t offset;
};

inline bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::toupper(static_cast<unsigned char>(x)) ==
                  std::toupper(static_cast<unsigned char>(y));
         });
}

inline std::vector<Token> lex(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    const auto uc = static_cast<unsigned char>(c);
    if (std::isspace(uc)) {
      ++i;
    } else if (c == '!') {
      out.push_back({Tok::Not, "!", i++});
    } else if (c == '&') {
      out.push_back({Tok::And, "&", i++});
    } else if (c == '|') {
      out.push_back({Tok::Or, "|", i++});
    } else if (c == '(') {
      out.push_back({Tok::LParen, "(", i++});
    } else if (c == ')') {
      out.push_back({Tok::RParen, ")", i++});
    } else if (std::isalpha(uc) || c == '_') {
      const std::size_t start = i;
      while (i < text.size() &&
             (std::isalnum(static_cast<unsigned char>(text[i])) || text[i] == '_')) {
        ++i;
      }
      std::string word(text.substr(start, i - start));
      Tok kind = Tok::Ident;
      if (iequals(word, "NOT")) kind = Tok::Not;
      else if (iequals(word, "AND")) kind = Tok::And;
      else if (iequals(word, "OR")) kind = Tok::Or;
      out.push_back({kind, std::move(word), start});
    } else {
      throw Error(ErrorCode::Syntax,
                  "illegal character '" + std::string(1, c) + "' at offset " +
                      std::to_string(i),
                  i);
    }
  }
  out.push_back({Tok::End, "", text.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::vector<Token> tokens) : tokens_(std::move(tokens)) {}

  Expression parse_all() {
    Expression e = parse_or();
    if (peek().kind != Tok::End) {
      fail(peek().kind == Tok::RParen ? "unbalanced ')'" : "unexpected token '" + peek().text + "'");
    }
    return e;
  }

 private:
  const Token& peek() const { return tokens_[pos_]; }
  const Token& advance() { return tokens_[pos_++]; }

  [[noreturn]] void fail(const std::string& what) const {
    const std::size_t at = peek().offset;
    throw Error(ErrorCode::Syntax, what + " at offset " + std::to_string(at), at);
  }

  Expression parse_or() {
    Expression lhs = parse_and();
    while (peek().kind == Tok::Or) {
      advance();
      lhs = Expression::disjunction(lhs, parse_and());
    }
    return lhs;
  }

  Expression parse_and() {
    Expression lhs = parse_unary();
    while (peek().kind == Tok::And) {
      advance();
      lhs = Expression::conjunction(lhs, parse_unary());
    }
    return lhs;
  }

  Expression parse_unary() {
    if (peek().kind == Tok::Not) {
      advance();
      return Expression::negation(parse_unary());
    }
    return parse_atom();
  }

  Expression parse_atom() {
    const Token& t = peek();
    switch (t.kind) {
      case Tok::Ident:
        advance();
        return Expression::primitive(t.text);
      case Tok::LParen: {
        advance();
        Expression inner = parse_or();
        if (peek().kind != Tok::RParen) fail("unbalanced '(' (expected ')')");
        advance();
        return inner;
      }
      case Tok::End:
        fail("dangling operator or empty input");
      case Tok::RParen:
        fail("unexpected ')'");
      default:
        fail("dangling operator '" + t.text + "'");
    }
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Expression parse(std::string_view text) {
  return detail::Parser(detail::lex(text)).parse_all();
}

/// Fully parenthesized canonical text; parse(print(e)) == e.
inline std::string print(const Expression& e) {
  switch (e.op()) {
    case Op::Primitive: return e.name();
    case Op::Not: return "(!" + print(e.child()) + ")";
    case Op::And: return "(" + print(e.left()) + " & " + print(e.right()) + ")";
    case Op::Or: return "(" + print(e.left()) + " | " + print(e.right()) + ")";
  }
  return {};
}

inline std::ostream& operator<<(std::ostream& os, const Expression& e) {
  return os << print(e);
}

/// Nodes with children before parents, leaves left to right.
inline std::vector<Expression> post_order(const Expression& e) {
  std::vector<Expression> out;
  out.reserve(e.node_count());
  auto visit = [&out](auto&& self, const Expression& n) -> void {
    if (n.op() == Op::Not) {
      self(self, n.child());
    } else if (n.op() != Op::Primitive) {
      self(self, n.left());
      self(self, n.right());
    }
    out.push_back(n);
  };
  visit(visit, e);
  return out;
}

inline bool eval_truth(const Expression& e, const Assignment& a) {
  switch (e.op()) {
    case Op::Primitive: {
      auto it = a.find(e.name());
      if (it == a.end()) throw Error(ErrorCode::MissingPrimitive, e.name());
      return it->second;
    }
    case Op::Not: return !eval_truth(e.child(), a);
    case Op::And: return eval_truth(e.left(), a) && eval_truth(e.right(), a);
    case Op::Or: return eval_truth(e.left(), a) || eval_truth(e.right(), a);
  }
  return false;
}

/// Evaluate with primitive values looked up by index (hot path for labeling).
/// `lookup(name)` must return the truth value of the named primitive.
template <typename Lookup>
bool eval_with(const Expression& e, const Lookup& lookup) {
  switch (e.op()) {
    case Op::Primitive: return lookup(e.name());
    case Op::Not: return !eval_with(e.child(), lookup);
    case Op::And: return eval_with(e.left(), lookup) && eval_with(e.right(), lookup);
    case Op::Or: return eval_with(e.left(), lookup) || eval_with(e.right(), lookup);
  }
  return false;
}

// ---------------------------------------------------------------------------
// Normal forms

namespace detail {

inline Expression nnf(const Expression& e, bool negated) {
  switch (e.op()) {
    case Op::Primitive: return negated ? Expression::negation(e) : e;
    case Op::Not: return nnf(e.child(), !negated);
    case Op::And:
    case Op::Or: {
      // De Morgan: a negated And becomes an Or of negations and vice versa.
      const Op op = negated ? (e.op() == Op::And ? Op::Or : Op::And) : e.op();
      return Expression::binary(op, nnf(e.left(), negated), nnf(e.right(), negated));
    }
  }
  return e;
}

struct Literal {
  std::string name;
  bool negated;
};
using Clause = std::vector<Literal>;

inline std::vector<Clause> clauses_of(const Expression& nnf_expr, std::size_t max_clauses) {
  switch (nnf_expr.op()) {
    case Op::Primitive: return {{{nnf_expr.name(), false}}};
    case Op::Not: return {{{nnf_expr.child().name(), true}}};
    case Op::And: {
      auto lhs = clauses_of(nnf_expr.left(), max_clauses);
      auto rhs = clauses_of(nnf_expr.right(), max_clauses);
      if (lhs.size() + rhs.size() > max_clauses) {
        throw Error(ErrorCode::SizeExceeded,
                    "CNF needs more than " + std::to_string(max_clauses) + " clauses");
      }
      lhs.insert(lhs.end(), rhs.begin(), rhs.end());
      return lhs;
    }
    case Op::Or: {
      auto lhs = clauses_of(nnf_expr.left(), max_clauses);
      auto rhs = clauses_of(nnf_expr.right(), max_clauses);
      if (lhs.size() * rhs.size() > max_clauses) {
        throw Error(ErrorCode::SizeExceeded,
                    "CNF needs more than " + std::to_string(max_clauses) + " clauses");
      }
      std::vector<Clause> out;
      out.reserve(lhs.size() * rhs.size());
      for (const auto& a : lhs) {
        for (const auto& b : rhs) {
          Clause c = a;
          c.insert(c.end(), b.begin(), b.end());
          out.push_back(std::move(c));
        }
      }
      return out;
    }
  }
  return {};
}

inline Expression literal_expr(const Literal& l) {
  auto p = Expression::primitive(l.name);
  return l.negated ? Expression::negation(p) : p;
}

}  // namespace detail

/// Negation normal form: negations sit directly above primitives.
inline Expression to_nnf(const Expression& e) { return detail::nnf(e, false); }

/// Conjunctive normal form by NNF + distribution. Throws SizeExceeded if more
/// than `max_clauses` clauses would be produced.
inline Expression to_cnf(const Expression& e, std::size_t max_clauses = 4096) {
  if (max_clauses < 1) throw Error(ErrorCode::Usage, "max_clauses must be >= 1");
  const auto clauses = detail::clauses_of(to_nnf(e), max_clauses);
  auto clause_expr = [](const detail::Clause& c) {
    Expression out = detail::literal_expr(c.front());
    for (std::size_t i = 1; i < c.size(); ++i) {
      out = Expression::disjunction(out, detail::literal_expr(c[i]));
    }
    return out;
  };
  Expression out = clause_expr(clauses.front());
  for (std::size_t i = 1; i < clauses.size(); ++i) {
    out = Expression::conjunction(out, clause_expr(clauses[i]));
  }
  return out;
}

/// Top-level conjuncts of a left- or right-nested And chain.
inline std::vector<Expression> conjuncts(const Expression& e) {
  if (e.op() != Op::And) return {e};
  auto lhs = conjuncts(e.left());
  auto rhs = conjuncts(e.right());
  lhs.insert(lhs.end(), rhs.begin(), rhs.end());
  return lhs;
}

/// Left-nested conjunction of `terms` (which must be non-empty).
inline Expression conjoin(const std::vector<Expression>& terms) {
  Expression out = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) out = Expression::conjunction(out, terms[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Random generation

/// AND of exactly `complexity` clauses, each an OR of `clause_width` distinct
/// primitives (optionally negated). No two clauses share a primitive set.
inline Expression random_cnf(const std::vector<std::string>& primitives,
                             std::size_t complexity, std::size_t clause_width,
                             bool allow_negation, RngStream& rng) {
  if (complexity < 1 || clause_width < 1) {
    throw Error(ErrorCode::Usage, "complexity and clause_width must be >= 1");
  }
  const std::size_t m = primitives.size();
  // Number of distinct primitive sets of size clause_width, capped.
  double sets = 1.0;
  for (std::size_t i = 0; i < clause_width; ++i) {
    sets *= static_cast<double>(m >= i ? m - i : 0) / static_cast<double>(i + 1);
  }
  if (m < clause_width || sets + 0.5 < static_cast<double>(complexity)) {
    throw Error(ErrorCode::InsufficientPrimitives,
                std::to_string(m) + " primitives cannot form " + std::to_string(complexity) +
                    " distinct clauses of width " + std::to_string(clause_width));
  }
  std::set<std::vector<std::size_t>> used;
  std::vector<Expression> clauses;
  while (clauses.size() < complexity) {
    auto pick = rng.choice(m, clause_width);
    std::vector<std::size_t> key = pick;
    std::sort(key.begin(), key.end());
    if (!used.insert(key).second) continue;
    std::sort(pick.begin(), pick.end());
    std::vector<Expression> lits;
    for (std::size_t idx : pick) {
      auto lit = Expression::primitive(primitives[idx]);
      if (allow_negation && rng.uniform() < 0.5) lit = Expression::negation(lit);
      lits.push_back(lit);
    }
    Expression clause = lits.front();
    for (std::size_t i = 1; i < lits.size(); ++i) clause = Expression::disjunction(clause, lits[i]);
    clauses.push_back(clause);
  }
  return conjoin(clauses);
}

/// AND of `complexity` distinct clauses drawn from `pool`.
inline Expression random_cnf_from_clauses(const std::vector<Expression>& pool,
                                          std::size_t complexity, RngStream& rng) {
  if (complexity < 1) throw Error(ErrorCode::Usage, "complexity must be >= 1");
  if (pool.size() < complexity) {
    throw Error(ErrorCode::InsufficientPrimitives,
                "clause pool of " + std::to_string(pool.size()) + " cannot supply " +
                    std::to_string(complexity) + " distinct clauses");
  }
  // Pool order, so one clause set has one printed form.
  auto idx = rng.choice(pool.size(), complexity);
  std::sort(idx.begin(), idx.end());
  std::vector<Expression> picked;
  for (std::size_t i : idx) picked.push_back(pool[i]);
  return conjoin(picked);
}

/// `count` distinct unordered primitive pairs joined by `op`, in sampled order.
inline std::vector<Expression> random_binary_expressions(
    const std::vector<std::string>& primitives, Op op, std::size_t count, RngStream& rng) {
  if (op != Op::And && op != Op::Or) throw Error(ErrorCode::Usage, "op must be and/or");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    for (std::size_t j = i + 1; j < primitives.size(); ++j) pairs.emplace_back(i, j);
  }
  if (count > pairs.size()) {
    throw Error(ErrorCode::InsufficientPrimitives,
                "requested " + std::to_string(count) + " pairs, only " +
                    std::to_string(pairs.size()) + " exist");
  }
  rng.shuffle(pairs);
  std::vector<Expression> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    out.push_back(Expression::binary(op, Expression::primitive(primitives[pairs[k].first]),
                                     Expression::primitive(primitives[pairs[k].second])));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Expression list files: one expression per line, '#' comments, blanks skipped.

inline std::vector<Expression> parse_expression_list(std::istream& in) {
  std::vector<Expression> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    try {
      out.push_back(parse(line));
    } catch (const Error& err) {
      throw Error(ErrorCode::Syntax, "line " + std::to_string(lineno) + ": " + err.what(),
                  err.offset());
    }
  }
  return out;
}

inline std::vector<Expression> read_expression_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  return parse_expression_list(in);
}

inline void write_expression_list(const std::string& path,
                                  const std::vector<Expression>& exprs,
                                  std::string_view header = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  if (!header.empty()) out << "# " << header << "\n";
  for (const auto& e : exprs) out << print(e) << "\n";
}

}  // namespace calg
