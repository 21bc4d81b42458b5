#pragma once

#include <cctype>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mzsim/terms.hpp"

// Operator-expression language used by scenario files:
//
//   expr    := sum ("+" "h.c.")?
//   sum     := term (("+"|"-") term)*
//   term    := factor ("*" factor)*
//   factor  := scalar | atom | "(" sum ")"
//   atom    := IDENT "'"?            trailing apostrophe = adjoint
//   scalar  := NUMBER | NUMBER "i" | "i"
//
// Example: "sz_A * c3 * c2A + h.c."

namespace mzsim::dsl {

class SyntaxError : public Error {
  public:
    SyntaxError(const std::string &msg, int line, int column)
        : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + msg), line_(line),
          column_(column) {}
    int line() const { return line_; }
    int column() const { return column_; }

  private:
    int line_, column_;
};

struct Node {
    enum class Kind { Scalar, Atom, Sum, Product } kind = Kind::Scalar;
    cplx value = 0;            // Scalar
    std::string ident;         // Atom
    bool dagger = false;       // Atom
    std::vector<Node> children; // Sum / Product
    std::vector<int> signs;    // Sum: +1 / -1 per child

    friend bool operator==(const Node &, const Node &) = default;
};

/// Parsed expression; `hermitian_conjugate` records a trailing "+ h.c.".
struct OpExpr {
    Node body;
    bool hermitian_conjugate = false;

    friend bool operator==(const OpExpr &, const OpExpr &) = default;
};

namespace detail {

struct Token {
    enum class Type { Number, Imag, Ident, Plus, Minus, Star, LParen, RParen, Quote, HC, End } type;
    std::string text;
    double number = 0;
    int line = 1, column = 1;
};

inline std::vector<Token> tokenize(const std::string &s) {
    std::vector<Token> out;
    int line = 1, col = 1;
    std::size_t i = 0;
    auto advance = [&](std::size_t n) {
        for (std::size_t k = 0; k < n; ++k) {
            if (s[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
            ++i;
        }
    };
    while (i < s.size()) {
        const char c = s[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            advance(1);
            continue;
        }
        Token t{Token::Type::End, "", 0, line, col};
        if (s.compare(i, 4, "h.c.") == 0) {
            t.type = Token::Type::HC;
            t.text = "h.c.";
            advance(4);
        } else if (std::isdigit(static_cast<unsigned char>(c)) || (c == '.' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
            std::size_t j = i;
            while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
            if (j < s.size() && (s[j] == 'e' || s[j] == 'E')) {
                std::size_t k = j + 1;
                if (k < s.size() && (s[k] == '+' || s[k] == '-')) ++k;
                if (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) {
                    j = k;
                    while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
                }
            }
            t.text = s.substr(i, j - i);
            std::istringstream is(t.text);
            is.imbue(std::locale::classic());
            if (!(is >> t.number) || !is.eof()) throw SyntaxError("malformed number '" + t.text + "'", line, col);
            t.type = Token::Type::Number;
            advance(j - i);
            // NUMBER "i" (no space) is an imaginary literal.
            if (i < s.size() && s[i] == 'i' &&
                (i + 1 >= s.size() || !(std::isalnum(static_cast<unsigned char>(s[i + 1])) || s[i + 1] == '_'))) {
                t.type = Token::Type::Imag;
                t.text += "i";
                advance(1);
            }
        } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t j = i;
            while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
            t.type = Token::Type::Ident;
            t.text = s.substr(i, j - i);
            advance(j - i);
        } else {
            switch (c) {
            case '+':
                t.type = Token::Type::Plus;
                break;
            case '-':
                t.type = Token::Type::Minus;
                break;
            case '*':
                t.type = Token::Type::Star;
                break;
            case '(':
                t.type = Token::Type::LParen;
                break;
            case ')':
                t.type = Token::Type::RParen;
                break;
            case '\'':
                t.type = Token::Type::Quote;
                break;
            default:
                throw SyntaxError(std::string("unexpected character '") + c + "'", line, col);
            }
            t.text = std::string(1, c);
            advance(1);
        }
        out.push_back(std::move(t));
    }
    out.push_back({Token::Type::End, "", 0, line, col});
    return out;
}

class Parser {
  public:
    explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

    OpExpr parse_expr() {
        OpExpr e;
        e.body = parse_sum(true);
        if (peek().type == Token::Type::Plus && peek(1).type == Token::Type::HC) {
            pos_ += 2;
            e.hermitian_conjugate = true;
        }
        if (peek().type == Token::Type::RParen) fail("unbalanced ')'");
        if (peek().type != Token::Type::End) fail("unexpected '" + peek().text + "'");
        return e;
    }

  private:
    const Token &peek(std::size_t k = 0) const { return toks_[std::min(pos_ + k, toks_.size() - 1)]; }
    [[noreturn]] void fail(const std::string &msg) const { throw SyntaxError(msg, peek().line, peek().column); }

    Node parse_sum(bool top) {
        Node sum;
        sum.kind = Node::Kind::Sum;
        sum.children.push_back(parse_term());
        sum.signs.push_back(1);
        while (peek().type == Token::Type::Plus || peek().type == Token::Type::Minus) {
            if (top && peek().type == Token::Type::Plus && peek(1).type == Token::Type::HC) break;
            const int sign = peek().type == Token::Type::Plus ? 1 : -1;
            ++pos_;
            if (peek().type == Token::Type::HC) fail("'h.c.' may only close the whole expression");
            sum.children.push_back(parse_term());
            sum.signs.push_back(sign);
        }
        if (sum.children.size() == 1) return std::move(sum.children.front());
        return sum;
    }

    Node parse_term() {
        Node prod;
        prod.kind = Node::Kind::Product;
        prod.children.push_back(parse_factor());
        while (peek().type == Token::Type::Star) {
            ++pos_;
            prod.children.push_back(parse_factor());
        }
        if (peek().type == Token::Type::Ident || peek().type == Token::Type::Number || peek().type == Token::Type::Imag ||
            peek().type == Token::Type::LParen)
            fail("expected '*' between factors");
        if (prod.children.size() == 1) return std::move(prod.children.front());
        return prod;
    }

    Node parse_factor() {
        const Token &t = peek();
        Node n;
        switch (t.type) {
        case Token::Type::Number:
            n.kind = Node::Kind::Scalar;
            n.value = t.number;
            ++pos_;
            return n;
        case Token::Type::Imag:
            n.kind = Node::Kind::Scalar;
            n.value = cplx(0, t.number);
            ++pos_;
            return n;
        case Token::Type::Ident:
            ++pos_;
            if (t.text == "i") {
                n.kind = Node::Kind::Scalar;
                n.value = cplx(0, 1);
                return n;
            }
            n.kind = Node::Kind::Atom;
            n.ident = t.text;
            if (peek().type == Token::Type::Quote) {
                n.dagger = true;
                ++pos_;
            }
            return n;
        case Token::Type::LParen: {
            ++pos_;
            if (peek().type == Token::Type::RParen) fail("empty parentheses");
            Node inner = parse_sum(false);
            if (peek().type != Token::Type::RParen) fail("missing ')'");
            ++pos_;
            return inner;
        }
        case Token::Type::End:
            fail("unexpected end of expression");
        case Token::Type::RParen:
            fail("unbalanced ')'");
        default:
            fail("unexpected '" + t.text + "'");
        }
    }

    std::vector<Token> toks_;
    std::size_t pos_ = 0;
};

inline std::string format_scalar(cplx v) {
    char buf[64];
    auto fmt = [&buf](double x) {
        std::snprintf(buf, sizeof buf, "%.17g", x);
        std::string s = buf;
        return s;
    };
    if (v.imag() == 0.0) return fmt(v.real());
    if (v.real() == 0.0) return v.imag() == 1.0 ? "i" : fmt(v.imag()) + "i";
    return "(" + fmt(v.real()) + " + " + fmt(v.imag()) + "i)";
}

inline std::string print_node(const Node &n, int parent_precedence) {
    switch (n.kind) {
    case Node::Kind::Scalar:
        return format_scalar(n.value);
    case Node::Kind::Atom:
        return n.ident + (n.dagger ? "'" : "");
    case Node::Kind::Product: {
        std::string s;
        for (std::size_t i = 0; i < n.children.size(); ++i) s += (i ? " * " : "") + print_node(n.children[i], 2);
        return parent_precedence >= 2 ? "(" + s + ")" : s;
    }
    case Node::Kind::Sum: {
        std::string s;
        for (std::size_t i = 0; i < n.children.size(); ++i) {
            if (i) s += n.signs[i] > 0 ? " + " : " - ";
            s += print_node(n.children[i], 1);
        }
        return parent_precedence >= 1 ? "(" + s + ")" : s;
    }
    }
    return {};
}

} // namespace detail

inline OpExpr parse(const std::string &text) { return detail::Parser(detail::tokenize(text)).parse_expr(); }

inline std::string print(const OpExpr &e) {
    return detail::print_node(e.body, 0) + (e.hermitian_conjugate ? " + h.c." : "");
}

enum class SymbolKind { Lower, PauliX, PauliY, PauliZ };

struct Symbol {
    std::string label;
    SymbolKind kind = SymbolKind::Lower;
};

using SymbolTable = std::map<std::string, Symbol>;

namespace detail {

struct Monomial {
    cplx coeff = 1;
    std::vector<LocalFactor> factors; // operator order
};

inline std::vector<Monomial> expand(const Node &n, const SpaceSpec &space, const SymbolTable &table) {
    switch (n.kind) {
    case Node::Kind::Scalar:
        return {Monomial{n.value, {}}};
    case Node::Kind::Atom: {
        auto it = table.find(n.ident);
        if (it == table.end()) throw Error("unresolved operator symbol '" + n.ident + "'");
        const std::size_t k = space.index_of(it->second.label);
        const SubsystemSpec &sub = space[k];
        DenseMatrix m;
        switch (it->second.kind) {
        case SymbolKind::Lower:
            if (!sub.is_boson()) throw Error("symbol '" + n.ident + "' needs a boson mode");
            m = local::annihilation(sub.cutoff);
            if (n.dagger) m = m.adjoint().eval();
            break;
        case SymbolKind::PauliX:
        case SymbolKind::PauliY:
        case SymbolKind::PauliZ: {
            if (sub.kind != SubsystemKind::TwoLevel) throw Error("symbol '" + n.ident + "' needs a two-level system");
            const char axis = it->second.kind == SymbolKind::PauliX ? 'x' : it->second.kind == SymbolKind::PauliY ? 'y' : 'z';
            m = local::pauli(axis); // self-adjoint; a trailing ' is accepted
            break;
        }
        }
        return {Monomial{1.0, {LocalFactor{k, std::move(m), n.ident + (n.dagger ? "'" : "")}}}};
    }
    case Node::Kind::Sum: {
        std::vector<Monomial> out;
        for (std::size_t i = 0; i < n.children.size(); ++i)
            for (auto m : expand(n.children[i], space, table)) {
                m.coeff *= static_cast<double>(n.signs[i]);
                out.push_back(std::move(m));
            }
        return out;
    }
    case Node::Kind::Product: {
        std::vector<Monomial> acc{Monomial{1.0, {}}};
        for (const auto &c : n.children) {
            const auto rhs = expand(c, space, table);
            std::vector<Monomial> next;
            for (const auto &a : acc)
                for (const auto &b : rhs) {
                    Monomial m{a.coeff * b.coeff, a.factors};
                    m.factors.insert(m.factors.end(), b.factors.begin(), b.factors.end());
                    next.push_back(std::move(m));
                }
            acc = std::move(next);
        }
        return acc;
    }
    }
    return {};
}

} // namespace detail

/// Expands the expression into product terms over `space`.
inline TermSum lower_terms(const OpExpr &e, const SpaceSpec &space, const SymbolTable &table) {
    TermSum t(space);
    for (const auto &m : detail::expand(e.body, space, table)) t.add(m.coeff, m.factors);
    if (e.hermitian_conjugate) t.append(t.adjoint());
    return t;
}

/// CSR operator of the expression; "+ h.c." forms are tagged Hermitian.
inline SparseOperator lower(const OpExpr &e, const SpaceSpec &space, const SymbolTable &table) {
    std::optional<bool> hint;
    if (e.hermitian_conjugate) hint = true;
    return lower_terms(e, space, table).to_sparse(hint);
}

} // namespace mzsim::dsl
