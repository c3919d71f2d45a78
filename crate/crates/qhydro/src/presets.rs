//! Named run configurations for the reference experiments.
//!
//! Names are stable: configs and scripts refer to them.

use crate::error::{Error, Result};
use crate::pde_forward::{PdeBoundary, SolveOptions};
use crate::pipeline::{
    DomainWallConfig, EquationConfig, FermionConfig, ForwardConfig, MagnonConfig, ModelConfig,
    PreprocessConfig, Profile, RegressConfig, RhsTerm, RunConfig, Stride, TrapConfig,
    ValidateConfig, WindowConfig,
};
use crate::preprocess::{Scheme, SmootherSpec};
use crate::quantum_sim::{Boundary, Coupling, Filling, WavePacket};
use crate::term_library::{FieldBudget, GenerateSpec, Term};

pub const NAMES: &[&str] = &[
    "fig_s1",
    "magnon_frontier",
    "trap",
    "domain_wall",
    "sin_wall",
    "fig_s5",
    "fig_s5_corrections",
    "fig_s5_coarse",
    "lifshitz",
    "linearized",
    "long_range",
    "long_range_alpha2_5",
    "burgers",
];

pub fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "fig_s1" => fig_s1(),
        "magnon_frontier" => {
            let mut c = fig_s1();
            c.preprocess.scheme = Scheme::Spectral;
            c
        }
        "trap" => trap(),
        "domain_wall" => domain_wall(),
        "sin_wall" => sin_wall(),
        "fig_s5" => fig_s5(),
        "fig_s5_corrections" => {
            let mut c = fig_s5();
            c.equations.retain(|e| e.target == "v");
            c.regress.lambda0 = 1e-6;
            c
        }
        "fig_s5_coarse" => {
            let mut c = fig_s5();
            c.preprocess.stride.t = 100;
            c.preprocess.stride.x = 100;
            c.preprocess.scheme = Scheme::Spectral;
            c.equations = euler_equations();
            c.regress.lambda0 = 5e-5;
            c
        }
        "lifshitz" => lifshitz(),
        "linearized" => linearized(),
        "long_range" => long_range(3.0),
        "long_range_alpha2_5" => long_range(2.5),
        "burgers" => burgers(),
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; known presets: {}",
                NAMES.join(", ")
            )))
        }
    })
}

fn terms(names: &[&str]) -> Vec<Term> {
    names
        .iter()
        .map(|s| s.parse().expect("preset term parses"))
        .collect()
}

fn budget(fields: &[(&str, u32)], max_dx: u32) -> GenerateSpec {
    GenerateSpec {
        fields: fields
            .iter()
            .map(|(n, p)| FieldBudget {
                name: n.to_string(),
                max_power: *p,
            })
            .collect(),
        max_dx,
        constant: true,
        log_deriv: vec![],
        spatial: None,
        special_sin: None,
        nonlocal: vec![],
    }
}

fn equation(target: &str) -> EquationConfig {
    EquationConfig {
        target: target.into(),
        terms: vec![],
        generate: None,
        ..EquationConfig::default()
    }
}

/// `1`, `∂x^n u` and `u·∂x^n u` for `n ≤ 4`.
pub fn magnon_library() -> GenerateSpec {
    budget(&[("u", 1)], 4)
}

/// `∂x^n u` for `n ≤ 4` and `u^m u_x` for `m ≤ 5`.
pub fn domain_wall_terms() -> Vec<Term> {
    terms(&[
        "u_x", "u_xx", "u_xxx", "u_xxxx", "u*u_x", "u^2*u_x", "u^3*u_x", "u^4*u_x", "u^5*u_x",
    ])
}

/// [`domain_wall_terms`] plus `sin(2π u/P)·u_x` for `P ≤ 10`.
pub fn sin_terms() -> Vec<Term> {
    let mut t = domain_wall_terms();
    t.extend((1..=10).map(|p| {
        format!("sin(2pi/{p}*u)*u_x")
            .parse::<Term>()
            .expect("sin term")
    }));
    t
}

/// Density powers up to 5, velocity up to 2, derivatives up to second order,
/// and `dlog(rho)`; 93 terms before any filter.
pub fn euler_budget() -> GenerateSpec {
    GenerateSpec {
        log_deriv: vec!["rho".into()],
        ..budget(&[("rho", 5), ("v", 2)], 2)
    }
}

/// 45-term Euler library: the 20 terms with the signature of `v_t`, plus
/// `ρ^n`, `ρ^n v`, `ρ^n v_x`, `ρ^n ρ_xx` and `v_xx`.
pub fn euler45_terms() -> Vec<Term> {
    let mut out = vec![];
    for n in 0..=5 {
        let rho = |rest: &str| -> String {
            match (n, rest.is_empty()) {
                (0, true) => "1".into(),
                (0, false) => rest.into(),
                (1, true) => "rho".into(),
                (1, false) => format!("rho*{rest}"),
                (_, true) => format!("rho^{n}"),
                (_, false) => format!("rho^{n}*{rest}"),
            }
        };
        for rest in ["rho_x", "v*v_x", "v^2*rho_x", "", "v", "v_x", "rho_xx"] {
            out.push(rho(rest));
        }
    }
    out.push("dlog(rho)".into());
    out.push("v^2*dlog(rho)".into());
    out.push("v_xx".into());
    out.iter().map(|s| s.parse().expect("euler term")).collect()
}

/// `1, ρ, ρ_x, ρ_xx, v, v_x, v_xx`.
pub fn linearized_terms() -> Vec<Term> {
    terms(&["1", "rho", "rho_x", "rho_xx", "v", "v_x", "v_xx"])
}

/// `u`, the refinable `|q|^μ` kernel and its fixed companions.
pub fn long_range_terms() -> Vec<Term> {
    terms(&[
        "u",
        "K[|q|^2]u",
        "K[q^2]u",
        "K[q^4]u",
        "K[log|q|]u",
        "K[q^2*log|q|]u",
        "K[q^4*log|q|]u",
    ])
}

fn fig_s1() -> RunConfig {
    RunConfig {
        model: ModelConfig::Magnon(MagnonConfig::default()),
        preprocess: PreprocessConfig::default(),
        equations: vec![EquationConfig {
            generate: Some(magnon_library()),
            ..equation("u")
        }],
        regress: RegressConfig {
            lambda0: 1e-3,
            ..RegressConfig::default()
        },
        validate: ValidateConfig {
            boundary: PdeBoundary::Periodic,
            solve: SolveOptions {
                scheme: Scheme::Central2,
                ..SolveOptions::default()
            },
        },
        ..RunConfig::default()
    }
}

fn trap() -> RunConfig {
    let mut c = fig_s1();
    c.model = ModelConfig::Magnon(MagnonConfig {
        trap: Some(TrapConfig {
            b0: 5e-4,
            center: 50.0,
        }),
        t_max: 39.99,
        nt: 4000,
        ..MagnonConfig::default()
    });
    let mut spec = magnon_library();
    spec.spatial = Some(crate::term_library::SpatialExtra {
        offset: 50.0,
        max_power: 4,
    });
    c.equations = vec![EquationConfig {
        generate: Some(spec),
        ..equation("u")
    }];
    c.regress.lambda0 = 1e-4;
    c
}

fn domain_wall() -> RunConfig {
    RunConfig {
        model: ModelConfig::DomainWall(DomainWallConfig::default()),
        preprocess: PreprocessConfig {
            stride: Stride { t: 1, x: 2 },
            smooth: Some(SmootherSpec::Gaussian { sigma: 1.5 }),
            window: WindowConfig {
                t_min: Some(200.0),
                t_max: None,
                x_min: Some(20.0),
                x_max: Some(1979.0),
            },
            ..PreprocessConfig::default()
        },
        equations: vec![EquationConfig {
            terms: domain_wall_terms(),
            symmetry_filter: false,
            ..equation("u")
        }],
        regress: RegressConfig {
            lambda0: 1e-4,
            ..RegressConfig::default()
        },
        validate: ValidateConfig {
            boundary: PdeBoundary::Clamped,
            solve: SolveOptions {
                scheme: Scheme::Central2,
                ..SolveOptions::default()
            },
        },
        ..RunConfig::default()
    }
}

/// Rarefaction of `u_t + sin(2π u/3) u_x = 0` from a smooth wall.
fn sin_wall() -> RunConfig {
    let central = SolveOptions {
        scheme: Scheme::Central2,
        ..SolveOptions::default()
    };
    RunConfig {
        model: ModelConfig::Forward(ForwardConfig {
            field: "u".into(),
            nx: 600,
            dx: 1.0,
            boundary: PdeBoundary::Clamped,
            initial: Profile::Wall {
                center: 300.0,
                width: 10.0,
                amplitude: 0.5,
            },
            rhs: vec![RhsTerm {
                coefficient: -1.0,
                term: "sin(2pi/3*u)*u_x".parse().expect("term"),
            }],
            solve: central.clone(),
            t_max: 200.0,
            nt: 201,
        }),
        preprocess: PreprocessConfig::default(),
        equations: vec![EquationConfig {
            terms: sin_terms(),
            ..equation("u")
        }],
        regress: RegressConfig {
            lambda0: 1e-3,
            ..RegressConfig::default()
        },
        validate: ValidateConfig {
            boundary: PdeBoundary::Clamped,
            solve: central,
        },
        ..RunConfig::default()
    }
}

fn burgers() -> RunConfig {
    RunConfig {
        model: ModelConfig::Forward(ForwardConfig::default()),
        preprocess: PreprocessConfig {
            scheme: Scheme::Spectral,
            ..PreprocessConfig::default()
        },
        equations: vec![EquationConfig {
            terms: terms(&[
                "u", "u_x", "u_xx", "u_xxx", "u_xxxx", "u*u_x", "u*u_xx", "u^2*u_x",
            ]),
            ..equation("u")
        }],
        regress: RegressConfig {
            lambda0: 1e-3,
            ..RegressConfig::default()
        },
        ..RunConfig::default()
    }
}

fn euler_equations() -> Vec<EquationConfig> {
    ["rho", "v"]
        .into_iter()
        .map(|t| EquationConfig {
            generate: Some(euler_budget()),
            symmetry_filter: true,
            ..equation(t)
        })
        .collect()
}

/// The density residual is an order of magnitude smaller than the velocity
/// residual, so continuity gets its own λ0.
fn fig_s5() -> RunConfig {
    let mut equations = euler_equations();
    equations[0].lambda0 = Some(1e-3);
    RunConfig {
        model: ModelConfig::Fermion(FermionConfig::default()),
        preprocess: PreprocessConfig::default(),
        equations,
        regress: RegressConfig {
            lambda0: 1e-2,
            ..RegressConfig::default()
        },
        validate: ValidateConfig::default(),
        ..RunConfig::default()
    }
}

fn lifshitz() -> RunConfig {
    let mut c = fig_s5();
    c.equations = euler_equations();
    c.model = ModelConfig::Fermion(FermionConfig {
        j2: -0.125,
        v0: -4e-3 * 0.5,
        sigma: 100.0,
        filling: Filling::Count(101),
        t_max: 4000.0,
        nt: 1000,
        ..FermionConfig::default()
    });
    c.regress.lambda0 = 1e-5;
    c.regress.lambda2 = 1e-12;
    c
}

fn linearized() -> RunConfig {
    let mut c = fig_s5();
    c.model = ModelConfig::Fermion(FermionConfig {
        v0: -0.02 * 0.5,
        t_max: 750.0,
        ..FermionConfig::default()
    });
    c.equations = ["rho", "v"]
        .into_iter()
        .map(|t| EquationConfig {
            terms: linearized_terms(),
            ..equation(t)
        })
        .collect();
    c.regress.lambda0 = 1e-4;
    c
}

fn long_range(alpha: f64) -> RunConfig {
    RunConfig {
        model: ModelConfig::Magnon(MagnonConfig {
            l: 400,
            j: -1.0,
            delta: -0.9,
            coupling: Coupling::LongRange { alpha },
            boundary: Boundary::Periodic,
            trap: None,
            packet: WavePacket {
                amplitude: 1.0,
                x0: 200.0,
                sigma: 5.0,
                k0: 0.0,
            },
            t_max: 20.0,
            nt: 401,
        }),
        preprocess: PreprocessConfig {
            scheme: Scheme::Spectral,
            ..PreprocessConfig::default()
        },
        equations: vec![EquationConfig {
            terms: long_range_terms(),
            mu_bracket: Some([1.2, 2.8]),
            ..equation("u")
        }],
        regress: RegressConfig {
            lambda0: 1e-3,
            ..RegressConfig::default()
        },
        validate: ValidateConfig::default(),
        ..RunConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term_library::{
        filter_by_signature, generate_terms, FieldParities, Library, Signature,
    };
    use crate::Parity;

    #[test]
    fn every_preset_validates() {
        for name in NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn library_sizes() {
        assert_eq!(generate_terms("u", &magnon_library()).unwrap().len(), 10);
        assert_eq!(domain_wall_terms().len(), 9);
        assert_eq!(sin_terms().len(), 19);
        assert_eq!(linearized_terms().len(), 7);
        assert_eq!(generate_terms("v", &euler_budget()).unwrap().len(), 93);
    }

    #[test]
    fn euler45_filters_to_the_generated_twenty() {
        let mut parities = FieldParities::new();
        parities.insert("rho".into(), (Some(Parity::Even), Some(Parity::Even)));
        parities.insert("v".into(), (Some(Parity::Odd), Some(Parity::Odd)));
        let want = Signature::new(-1, 1).unwrap();
        let lib = Library::new("v", euler45_terms()).unwrap();
        assert_eq!(lib.len(), 45);
        let small = filter_by_signature(&lib, want, &parities).unwrap();
        let big = filter_by_signature(
            &generate_terms("v", &euler_budget()).unwrap(),
            want,
            &parities,
        )
        .unwrap();
        let mut a = small.names();
        let mut b = big.names();
        a.sort();
        b.sort();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
    }
}
