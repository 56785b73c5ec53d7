//! Exact checks of the cat-map periodic data against arithmetic in ℤ[(1+√5)/2].

use std::collections::BTreeSet;

use sympcocycle::base::{catmap_fixed_point_count, periodic_points_catmap, MAX_CAT_PERIOD};

/// `(a + b√5)/2` with integer `a, b` of equal parity.
#[derive(Clone, Copy, PartialEq, Debug)]
struct Golden(i128, i128);

impl Golden {
    fn mul(self, o: Golden) -> Golden {
        Golden((self.0 * o.0 + 5 * self.1 * o.1) / 2, (self.0 * o.1 + self.1 * o.0) / 2)
    }
}

/// Number of fixed points of `A^n`: `|det(A^n − I)| = λⁿ + λ⁻ⁿ − 2` with `λ = φ²`.
fn fixed_count(n: u32) -> i128 {
    let lambda = Golden(3, 1);
    let mut p = Golden(2, 0);
    for _ in 0..n {
        p = p.mul(lambda);
    }
    // λⁿ + λ⁻ⁿ is the rational part doubled, i.e. `p.0`.
    p.0 - 2
}

fn mobius(n: u32) -> i128 {
    let (mut n, mut sign, mut d) = (n, 1, 2);
    while d * d <= n {
        if n % d == 0 {
            n /= d;
            if n % d == 0 {
                return 0;
            }
            sign = -sign;
        }
        d += 1;
    }
    if n > 1 {
        sign = -sign;
    }
    sign
}

fn minimal_count(n: u32) -> i128 {
    (1..=n).filter(|d| n % d == 0).map(|d| mobius(n / d) * fixed_count(d)).sum()
}

#[test]
fn fixed_point_counts_match_lucas_numbers() {
    for n in 1..=MAX_CAT_PERIOD {
        assert_eq!(catmap_fixed_point_count(n) as i128, fixed_count(n), "period {n}");
        let pts = periodic_points_catmap(n).unwrap();
        assert_eq!(pts.len() as i128, fixed_count(n), "period {n}");
        let minimal = pts.iter().filter(|o| o.period == n).count() as i128;
        assert_eq!(minimal, minimal_count(n), "period {n}");
    }
}

#[test]
fn enumerated_points_are_exactly_the_grid_solutions() {
    for n in 1..=6u32 {
        let d = fixed_count(n);
        // Brute force over the 1/d grid with exact integer powers of A.
        let mut brute = BTreeSet::new();
        for i in 0..d {
            for j in 0..d {
                let (mut x, mut y) = (i, j);
                for _ in 0..n {
                    (x, y) = ((2 * x + y) % d, (x + y) % d);
                }
                if (x, y) == (i, j) {
                    let g = gcd(gcd(i, j), d);
                    brute.insert((i / g, j / g, d / g));
                }
            }
        }
        let ours: BTreeSet<_> = periodic_points_catmap(n)
            .unwrap()
            .into_iter()
            .map(|o| (o.point.a as i128, o.point.b as i128, o.point.den as i128))
            .collect();
        assert_eq!(ours, brute, "period {n}");
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

#[test]
fn oracle_small_values() {
    // 1, 5, 16, 45 fixed points for periods 1..4.
    assert_eq!([1, 2, 3, 4].map(fixed_count), [1, 5, 16, 45]);
    assert_eq!(minimal_count(2), 4);
    assert_eq!(minimal_count(4), 40);
}
