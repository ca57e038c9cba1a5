//! Expression parser robustness.

use kolmo::expr::Expr;
use proptest::prelude::*;

const VOCABULARY: &[&str] = &[
    "x1", "x2", "t", "1", "0.5", "2e-3", ".", "+", "-", "*", "/", "^", "(", ")", ",", "sin", "cos",
    "exp", "abs", "tanh", "step", "min", "max", "powb", "foo", "x0", "e", "#", "1e", "x", " ",
    "\n",
];

fn streams() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(VOCABULARY), 0..40).prop_map(|toks| toks.concat())
}

fn operands() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "x1",
        "x2",
        "t",
        "1.5",
        "sin(x1)",
        "powb(x2, 0.5)",
        "(x1 - t)",
    ])
    .prop_map(str::to_string)
}

fn unknown_identifiers() -> impl Strategy<Value = String> {
    "[a-z_][a-z0-9_]{0,6}".prop_filter("must not be a known name", |s| {
        let known = [
            "t", "sin", "cos", "exp", "abs", "tanh", "step", "min", "max", "powb",
        ];
        let variable = s.len() > 1
            && s.starts_with('x')
            && s[1..].chars().all(|c| c.is_ascii_digit())
            && !s[1..].starts_with('0');
        !known.contains(&s.as_str()) && !variable
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_token_streams_never_panic(src in streams(), x in prop::array::uniform2(-3.0f64..3.0), t in 0.0f64..1.0) {
        match Expr::parse(&src) {
            Ok(e) => {
                let first = e.eval(t, &x);
                prop_assert_eq!(&first, &e.eval(t, &x));
                if let Ok(v) = first {
                    prop_assert!(v.is_finite());
                }
            }
            Err(err) => {
                prop_assert!(err.line >= 1 && err.column >= 1);
                prop_assert!(!err.message.is_empty());
            }
        }
    }

    #[test]
    fn unknown_identifiers_are_rejected(
        left in operands(),
        right in operands(),
        name in unknown_identifiers(),
        call in any::<bool>(),
    ) {
        let bad = if call { format!("{name}({right})") } else { name.clone() };
        let src = format!("{left} + {bad} * {right}");
        let good = format!("{left} + {right}");
        prop_assert!(Expr::parse(&good).is_ok());
        prop_assert!(Expr::parse(&src).is_err(), "accepted `{}`", src);
    }
}
