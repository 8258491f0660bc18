//! A tiny imperative language used as the code side of the synthetic tasks.
//!
//! Grammar (all binary operators share one precedence level and associate to
//! the left):
//!
//! ```text
//! program := stmt+
//! stmt    := ident "=" expr ";" | "return" expr ";" | "if" "(" expr ")" "{" stmt+ "}"
//! expr    := term (op term)*
//! term    := ident | number | "(" expr ")"
//! op      := "+" | "-" | "*" | "/" | "<" | ">"
//! ```
//!
//! Besides the parser this module provides the two structural signals CodeBLEU
//! needs: a multiset of anonymized subtrees and def-use dataflow edges.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};

/// Keywords; the weighted n-gram component of CodeBLEU up-weights n-grams
/// containing any of these.
pub const KEYWORDS: [&str; 2] = ["if", "return"];

pub const OPERATORS: [&str; 6] = ["+", "-", "*", "/", "<", ">"];

const SYMBOLS: &str = "=;(){}+-*/<>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Ident,
    Number,
    Keyword,
    Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offset into the source text.
    pub offset: usize,
}

pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            let kind = if KEYWORDS.contains(&word) {
                TokenKind::Keyword
            } else {
                TokenKind::Ident
            };
            out.push(Token {
                kind,
                text: word.to_string(),
                offset: start,
            });
        } else if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            out.push(Token {
                kind: TokenKind::Number,
                text: text[start..i].to_string(),
                offset: start,
            });
        } else if SYMBOLS.as_bytes().contains(&c) {
            out.push(Token {
                kind: TokenKind::Symbol,
                text: (c as char).to_string(),
                offset: i,
            });
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap_or('\u{fffd}');
            return Err(Error::Lex { offset: i, ch });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Program,
    Assign,
    Return,
    If,
    BinaryOp,
    Identifier,
    Number,
}

impl NodeKind {
    /// Name used in canonical subtree strings; leaves are anonymized.
    fn canonical(self) -> &'static str {
        match self {
            NodeKind::Program => "Program",
            NodeKind::Assign => "Assign",
            NodeKind::Return => "Return",
            NodeKind::If => "If",
            NodeKind::BinaryOp => "BinaryOp",
            NodeKind::Identifier => "ID",
            NodeKind::Number => "NUM",
        }
    }

    pub fn is_leaf(self) -> bool {
        matches!(self, NodeKind::Identifier | NodeKind::Number)
    }
}

/// Syntax tree node.
///
/// `position` is the token index a leaf was parsed from; it is `None` for
/// structural nodes and for trees built by hand. Equality ignores it so that
/// trees compare by shape and labels only.
#[derive(Debug, Clone)]
pub struct AstNode {
    pub kind: NodeKind,
    pub children: Vec<AstNode>,
    pub label: String,
    pub position: Option<usize>,
}

impl PartialEq for AstNode {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.label == other.label && self.children == other.children
    }
}

impl Eq for AstNode {}

impl AstNode {
    pub fn program(stmts: Vec<AstNode>) -> Self {
        Self::node(NodeKind::Program, "", stmts)
    }

    pub fn assign(target: &str, expr: AstNode) -> Self {
        Self::node(NodeKind::Assign, "", vec![Self::ident(target), expr])
    }

    pub fn ret(expr: AstNode) -> Self {
        Self::node(NodeKind::Return, "", vec![expr])
    }

    pub fn if_stmt(cond: AstNode, body: Vec<AstNode>) -> Self {
        Self::node(NodeKind::If, "", vec![cond, Self::program(body)])
    }

    pub fn binary(op: &str, lhs: AstNode, rhs: AstNode) -> Self {
        Self::node(NodeKind::BinaryOp, op, vec![lhs, rhs])
    }

    pub fn ident(name: &str) -> Self {
        Self::node(NodeKind::Identifier, name, Vec::new())
    }

    pub fn number(value: &str) -> Self {
        Self::node(NodeKind::Number, value, Vec::new())
    }

    fn node(kind: NodeKind, label: &str, children: Vec<AstNode>) -> Self {
        AstNode {
            kind,
            children,
            label: label.to_string(),
            position: None,
        }
    }

    fn leaf_at(kind: NodeKind, label: &str, position: usize) -> Self {
        AstNode {
            position: Some(position),
            ..Self::node(kind, label, Vec::new())
        }
    }

    /// Checks the arity rules for every node in the tree.
    pub fn is_well_formed(&self) -> bool {
        let arity_ok = match self.kind {
            NodeKind::Program => {
                !self.children.is_empty() && self.children.iter().all(|c| c.is_statement())
            }
            NodeKind::Assign => {
                self.children.len() == 2
                    && self.children[0].kind == NodeKind::Identifier
                    && self.children[1].is_expression()
            }
            NodeKind::Return => self.children.len() == 1 && self.children[0].is_expression(),
            NodeKind::If => {
                self.children.len() == 2
                    && self.children[0].is_expression()
                    && self.children[1].kind == NodeKind::Program
            }
            NodeKind::BinaryOp => {
                self.children.len() == 2 && self.children.iter().all(|c| c.is_expression())
            }
            NodeKind::Identifier | NodeKind::Number => self.children.is_empty(),
        };
        arity_ok && self.children.iter().all(|c| c.is_well_formed())
    }

    fn is_statement(&self) -> bool {
        matches!(self.kind, NodeKind::Assign | NodeKind::Return | NodeKind::If)
    }

    fn is_expression(&self) -> bool {
        matches!(
            self.kind,
            NodeKind::BinaryOp | NodeKind::Identifier | NodeKind::Number
        )
    }
}

/// Canonical source text: single spaces between tokens, right operands that
/// are themselves operations parenthesized.
pub fn pretty_print(ast: &AstNode) -> String {
    let mut out = Vec::new();
    print_node(ast, &mut out);
    out.join(" ")
}

fn print_node<'a>(node: &'a AstNode, out: &mut Vec<&'a str>) {
    match node.kind {
        NodeKind::Program => node.children.iter().for_each(|c| print_node(c, out)),
        NodeKind::Assign => {
            print_node(&node.children[0], out);
            out.push("=");
            print_node(&node.children[1], out);
            out.push(";");
        }
        NodeKind::Return => {
            out.push("return");
            print_node(&node.children[0], out);
            out.push(";");
        }
        NodeKind::If => {
            out.extend(["if", "("]);
            print_node(&node.children[0], out);
            out.extend([")", "{"]);
            print_node(&node.children[1], out);
            out.push("}");
        }
        NodeKind::BinaryOp => {
            print_node(&node.children[0], out);
            out.push(&node.label);
            let rhs = &node.children[1];
            if rhs.kind == NodeKind::BinaryOp {
                out.push("(");
                print_node(rhs, out);
                out.push(")");
            } else {
                print_node(rhs, out);
            }
        }
        NodeKind::Identifier | NodeKind::Number => out.push(&node.label),
    }
}

impl fmt::Display for AstNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty_print(self))
    }
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
}

impl<'t> Parser<'t> {
    fn peek(&self) -> Option<&'t Token> {
        self.tokens.get(self.pos)
    }

    fn peek_is(&self, text: &str) -> bool {
        self.peek().is_some_and(|t| t.text == text)
    }

    fn fail<T>(&self, expected: &str) -> Result<T> {
        Err(Error::Parse {
            position: self.pos,
            expected: expected.to_string(),
        })
    }

    fn expect(&mut self, text: &str) -> Result<()> {
        if self.peek_is(text) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&format!("`{text}`"))
        }
    }

    fn statements(&mut self, terminator: Option<&str>) -> Result<Vec<AstNode>> {
        let mut stmts = vec![self.statement()?];
        loop {
            match (self.peek(), terminator) {
                (None, None) => return Ok(stmts),
                (Some(t), Some(end)) if t.text == end => return Ok(stmts),
                (None, Some(end)) => return self.fail(&format!("statement or `{end}`")),
                _ => stmts.push(self.statement()?),
            }
        }
    }

    fn statement(&mut self) -> Result<AstNode> {
        let Some(tok) = self.peek() else {
            return self.fail("statement");
        };
        match (tok.kind, tok.text.as_str()) {
            (TokenKind::Keyword, "return") => {
                self.pos += 1;
                let expr = self.expression()?;
                self.expect(";")?;
                Ok(AstNode::ret(expr))
            }
            (TokenKind::Keyword, "if") => {
                self.pos += 1;
                self.expect("(")?;
                let cond = self.expression()?;
                self.expect(")")?;
                self.expect("{")?;
                let body = self.statements(Some("}"))?;
                self.expect("}")?;
                Ok(AstNode::if_stmt(cond, body))
            }
            (TokenKind::Ident, name) => {
                let target = AstNode::leaf_at(NodeKind::Identifier, name, self.pos);
                self.pos += 1;
                self.expect("=")?;
                let expr = self.expression()?;
                self.expect(";")?;
                Ok(AstNode::node(NodeKind::Assign, "", vec![target, expr]))
            }
            _ => self.fail("statement (identifier, `return` or `if`)"),
        }
    }

    fn expression(&mut self) -> Result<AstNode> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek().filter(|t| OPERATORS.contains(&t.text.as_str())) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = AstNode::binary(&op.text, lhs, rhs);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<AstNode> {
        let Some(tok) = self.peek() else {
            return self.fail("expression");
        };
        match tok.kind {
            TokenKind::Ident => {
                self.pos += 1;
                Ok(AstNode::leaf_at(NodeKind::Identifier, &tok.text, self.pos - 1))
            }
            TokenKind::Number => {
                self.pos += 1;
                Ok(AstNode::leaf_at(NodeKind::Number, &tok.text, self.pos - 1))
            }
            TokenKind::Symbol if tok.text == "(" => {
                self.pos += 1;
                let inner = self.expression()?;
                self.expect(")")?;
                Ok(inner)
            }
            _ => self.fail("expression"),
        }
    }
}

pub fn parse(tokens: &[Token]) -> Result<AstNode> {
    let mut parser = Parser { tokens, pos: 0 };
    let stmts = parser.statements(None)?;
    Ok(AstNode::program(stmts))
}

/// Tokenize and parse in one step.
pub fn parse_source(text: &str) -> Result<(Vec<Token>, AstNode)> {
    let tokens = tokenize(text)?;
    let ast = parse(&tokens)?;
    Ok((tokens, ast))
}

/// Multiset of canonical subtree strings, keyed by string with occurrence counts.
pub type SubtreeBag = BTreeMap<String, usize>;

/// One `kind(childKind,...)` string per internal node.
pub fn subtrees(ast: &AstNode) -> SubtreeBag {
    let mut bag = SubtreeBag::new();
    collect_subtrees(ast, &mut bag);
    bag
}

fn collect_subtrees(node: &AstNode, bag: &mut SubtreeBag) {
    if node.kind.is_leaf() {
        return;
    }
    let kids: Vec<&str> = node.children.iter().map(|c| c.kind.canonical()).collect();
    let key = format!("{}({})", node.kind.canonical(), kids.join(","));
    *bag.entry(key).or_insert(0) += 1;
    for child in &node.children {
        collect_subtrees(child, bag);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataflowEdge {
    pub use_position: usize,
    pub def_position: usize,
    pub variable: String,
}

/// Def-use edges: every identifier read binds to the most recent preceding
/// assignment of that name. Definitions inside an `if` body stay visible
/// after the body.
pub fn dataflow_edges(ast: &AstNode, tokens: &[Token]) -> Vec<DataflowEdge> {
    let mut defs: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    walk_statements(&ast.children, tokens, &mut defs, &mut edges);
    edges.sort_by_key(|e| e.use_position);
    edges
}

fn walk_statements(
    stmts: &[AstNode],
    tokens: &[Token],
    defs: &mut HashMap<String, usize>,
    edges: &mut Vec<DataflowEdge>,
) {
    for stmt in stmts {
        match stmt.kind {
            NodeKind::Assign => {
                walk_uses(&stmt.children[1], tokens, defs, edges);
                let target = &stmt.children[0];
                if let Some(pos) = target.position {
                    defs.insert(target.label.clone(), pos);
                }
            }
            NodeKind::Return => walk_uses(&stmt.children[0], tokens, defs, edges),
            NodeKind::If => {
                walk_uses(&stmt.children[0], tokens, defs, edges);
                walk_statements(&stmt.children[1].children, tokens, defs, edges);
            }
            _ => {}
        }
    }
}

fn walk_uses(
    expr: &AstNode,
    tokens: &[Token],
    defs: &HashMap<String, usize>,
    edges: &mut Vec<DataflowEdge>,
) {
    match expr.kind {
        NodeKind::Identifier => {
            let (Some(use_pos), Some(&def_pos)) = (expr.position, defs.get(&expr.label)) else {
                return;
            };
            let same_token = |p: usize| tokens.get(p).is_some_and(|t| t.text == expr.label);
            if same_token(use_pos) && same_token(def_pos) {
                edges.push(DataflowEdge {
                    use_position: use_pos,
                    def_position: def_pos,
                    variable: expr.label.clone(),
                });
            }
        }
        _ => expr
            .children
            .iter()
            .for_each(|c| walk_uses(c, tokens, defs, edges)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<String> {
        tokenize(src).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn tokenizes_simple_assignment() {
        assert_eq!(texts("a = 1 ;"), ["a", "=", "1", ";"]);
    }

    #[test]
    fn tokenizes_without_whitespace() {
        assert_eq!(
            texts("if(x<2){return x;}"),
            ["if", "(", "x", "<", "2", ")", "{", "return", "x", ";", "}"]
        );
        let toks = tokenize("if(x<2)").unwrap();
        assert_eq!(toks[0].kind, TokenKind::Keyword);
        assert_eq!(toks[2].kind, TokenKind::Ident);
        // identifiers that merely start with a keyword stay identifiers
        assert_eq!(tokenize("iffy").unwrap()[0].kind, TokenKind::Ident);
    }

    #[test]
    fn lexical_error_reports_offset() {
        match tokenize("a @ b") {
            Err(Error::Lex { offset, ch }) => {
                assert_eq!(offset, 2);
                assert_eq!(ch, '@');
            }
            other => panic!("expected lex error, got {other:?}"),
        }
    }

    #[test]
    fn parses_assignment() {
        let (_, ast) = parse_source("a = 1 ;").unwrap();
        assert_eq!(
            ast,
            AstNode::program(vec![AstNode::assign("a", AstNode::number("1"))])
        );
        assert!(ast.is_well_formed());
    }

    #[test]
    fn operators_are_left_associative_with_flat_precedence() {
        let (_, ast) = parse_source("x = 1 + 2 * 3 ;").unwrap();
        let expected = AstNode::binary(
            "*",
            AstNode::binary("+", AstNode::number("1"), AstNode::number("2")),
            AstNode::number("3"),
        );
        assert_eq!(ast.children[0].children[1], expected);
    }

    #[test]
    fn missing_expression_is_a_parse_error() {
        let err = parse_source("return ;").unwrap_err();
        assert!(err.to_string().contains("expected expression"), "{err}");
        assert!(matches!(err, Error::Parse { position: 1, .. }));
    }

    #[test]
    fn empty_program_is_rejected() {
        let err = parse(&[]).unwrap_err();
        assert!(matches!(err, Error::Parse { position: 0, .. }));
    }

    #[test]
    fn unexpected_token_names_expected_set() {
        let err = parse_source("a 1 ;").unwrap_err();
        assert!(err.to_string().contains("`=`"), "{err}");
        let err = parse_source("if ( a ) { a = 1 ;").unwrap_err();
        assert!(err.to_string().contains("`}`"), "{err}");
    }

    #[test]
    fn parenthesized_right_operand() {
        let (_, ast) = parse_source("return a - ( b / 2 ) ;").unwrap();
        let expected = AstNode::binary(
            "-",
            AstNode::ident("a"),
            AstNode::binary("/", AstNode::ident("b"), AstNode::number("2")),
        );
        assert_eq!(ast.children[0].children[0], expected);
        assert_eq!(pretty_print(&ast), "return a - ( b / 2 ) ;");
    }

    #[test]
    fn subtrees_of_assignment() {
        let (_, ast) = parse_source("a = 1 ;").unwrap();
        let bag = subtrees(&ast);
        let expected: SubtreeBag = [("Program(Assign)".to_string(), 1), ("Assign(ID,NUM)".to_string(), 1)]
            .into_iter()
            .collect();
        assert_eq!(bag, expected);
    }

    #[test]
    fn subtrees_are_anonymized() {
        let a = subtrees(&parse_source("a = 1 ;").unwrap().1);
        let b = subtrees(&parse_source("b = 2 ;").unwrap().1);
        assert_eq!(a, b);
    }

    #[test]
    fn subtrees_count_repeats() {
        // Program(Assign,Assign,Return), Assign(ID,NUM) x1, Assign(ID,BinaryOp) x1,
        // BinaryOp(ID,NUM) x1, Return(ID) x1
        let (_, ast) = parse_source("a = 1 ; a = a + 1 ; return a ;").unwrap();
        let bag = subtrees(&ast);
        assert_eq!(bag["Program(Assign,Assign,Return)"], 1);
        assert_eq!(bag["Assign(ID,NUM)"], 1);
        assert_eq!(bag["Assign(ID,BinaryOp)"], 1);
        assert_eq!(bag["BinaryOp(ID,NUM)"], 1);
        assert_eq!(bag["Return(ID)"], 1);
        assert_eq!(bag.values().sum::<usize>(), 5);
    }

    #[test]
    fn single_def_use_chain() {
        let (toks, ast) = parse_source("a = 1 ; return a ;").unwrap();
        let edges = dataflow_edges(&ast, &toks);
        assert_eq!(
            edges,
            vec![DataflowEdge {
                use_position: 5,
                def_position: 0,
                variable: "a".into()
            }]
        );
    }

    #[test]
    fn undefined_use_has_no_edge() {
        let (toks, ast) = parse_source("return a ;").unwrap();
        assert!(dataflow_edges(&ast, &toks).is_empty());
    }

    #[test]
    fn redefinition_binds_to_nearest_def() {
        // a0 =1 12 ;3 a4 =5 a6 +7 18 ;9 return10 a11 ;12
        let (toks, ast) = parse_source("a = 1 ; a = a + 1 ; return a ;").unwrap();
        let pairs: Vec<(usize, usize)> = dataflow_edges(&ast, &toks)
            .iter()
            .map(|e| (e.use_position, e.def_position))
            .collect();
        assert_eq!(pairs, vec![(6, 0), (11, 4)]);
    }

    #[test]
    fn if_body_scoping() {
        // x0 =1 12 ;3 if4 (5 x6 <7 28 )9 {10 x11 =12 x13 ;14 y15 =16 x17 ;18 }19 return20 x21 ;22
        let src = "x = 1 ; if ( x < 2 ) { x = x ; y = x ; } return x ;";
        let (toks, ast) = parse_source(src).unwrap();
        let pairs: Vec<(usize, usize)> = dataflow_edges(&ast, &toks)
            .iter()
            .map(|e| (e.use_position, e.def_position))
            .collect();
        assert_eq!(pairs, vec![(6, 0), (13, 0), (17, 11), (21, 11)]);
    }
}
