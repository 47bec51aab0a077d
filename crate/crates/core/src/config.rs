//! Run configuration: a flat `[section]` / `key = value` text format with
//! explicit units in the key names, line-numbered parse errors, and one-pass
//! validation that reports every violation instead of stopping at the first.

use crate::device::{DeviceSpec, DisorderMode, MaterialParams, RoughnessSpec};
use crate::ekgrid::GridMode;
use crate::scattering::ScatteringParams;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ConfigError {
    /// 1-based line number; 0 for whole-file / cross-key violations.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: {}", self.line, self.message)
        } else {
            write!(f, "{}", self.message)
        }
    }
}

/// Energy/momentum quadrature settings.
#[derive(Debug, Clone)]
pub struct GridSettings {
    pub e_min_ev: f64,
    pub e_max_ev: f64,
    pub points_per_eop: usize,
    pub n_momenta: usize,
    pub mode: GridMode,
    /// Extra energy points inserted by adaptive refinement.
    pub adaptive_budget: usize,
}

#[derive(Debug, Clone)]
pub struct BiasSettings {
    pub gate_voltages_v: Vec<f64>,
    pub drain_voltage_v: f64,
    pub mu_source_ev: f64,
    pub mu_drain_ev: f64,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub born_tolerance_ev: f64,
    pub born_max_iterations: usize,
    pub born_mixing: f64,
    pub outer_tolerance_v: f64,
    pub outer_max_iterations: usize,
    pub outer_mixing: f64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct PoissonSettings {
    pub eps_semiconductor: f64,
    pub eps_oxide: f64,
    pub n_oxide_rows: usize,
    pub doping_n_d_per_nm3: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleSettings {
    pub n_samples: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub device: DeviceSpec,
    pub materials: MaterialParams,
    pub scattering: ScatteringParams,
    pub grid: GridSettings,
    pub bias: BiasSettings,
    pub solver: SolverSettings,
    pub poisson: PoissonSettings,
    pub ensemble: Option<EnsembleSettings>,
    pub output_dir: String,
}

/// Raw key-value table with the line each key was defined on.
struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
    errors: Vec<ConfigError>,
}

impl RawConfig {
    fn parse(text: &str) -> RawConfig {
        let mut entries = BTreeMap::new();
        let mut errors = Vec::new();
        let mut section = String::new();
        for (i, raw_line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                match name.strip_suffix(']') {
                    Some(inner) if !inner.trim().is_empty() => {
                        section = inner.trim().to_string();
                    }
                    _ => errors.push(ConfigError {
                        line: lineno,
                        message: format!("malformed section header `{line}`"),
                    }),
                }
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => {
                    let key = key.trim();
                    if key.is_empty() {
                        errors.push(ConfigError {
                            line: lineno,
                            message: "empty key before `=`".into(),
                        });
                        continue;
                    }
                    let full = if section.is_empty() {
                        key.to_string()
                    } else {
                        format!("{section}.{key}")
                    };
                    if entries.contains_key(&full) {
                        errors.push(ConfigError {
                            line: lineno,
                            message: format!("duplicate key `{full}`"),
                        });
                    }
                    entries.insert(full, (lineno, value.trim().to_string()));
                }
                None => errors.push(ConfigError {
                    line: lineno,
                    message: format!("expected `key = value`, got `{line}`"),
                }),
            }
        }
        RawConfig { entries, errors }
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Option<T> {
        match self.entries.remove(key) {
            Some((line, value)) => match value.parse::<T>() {
                Ok(v) => Some(v),
                Err(_) => {
                    self.errors.push(ConfigError {
                        line,
                        message: format!("cannot parse `{value}` for key `{key}`"),
                    });
                    None
                }
            },
            None => {
                if default.is_none() {
                    self.errors.push(ConfigError {
                        line: 0,
                        message: format!("missing required key `{key}`"),
                    });
                }
                default
            }
        }
    }

    fn take_list_f64(&mut self, key: &str, default: Option<Vec<f64>>) -> Option<Vec<f64>> {
        match self.entries.remove(key) {
            Some((line, value)) => {
                let mut out = Vec::new();
                let mut ok = true;
                for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    match part.parse::<f64>() {
                        Ok(v) => out.push(v),
                        Err(_) => {
                            self.errors.push(ConfigError {
                                line,
                                message: format!("cannot parse list item `{part}` for key `{key}`"),
                            });
                            ok = false;
                        }
                    }
                }
                ok.then_some(out)
            }
            None => {
                if default.is_none() {
                    self.errors.push(ConfigError {
                        line: 0,
                        message: format!("missing required key `{key}`"),
                    });
                }
                default
            }
        }
    }
}

/// Parse and validate a config from text. On failure, every violation found
/// is returned, with line numbers where they are tied to a specific line.
pub fn parse_config(text: &str) -> Result<RunConfig, Vec<ConfigError>> {
    let mut raw = RawConfig::parse(text);
    let r = &mut raw;

    let n_slabs = r.take::<usize>("device.n_slabs", None);
    let sites_per_slab = r.take::<usize>("device.sites_per_slab", None);
    let lattice_constant_nm = r.take::<f64>("device.lattice_constant_nm", Some(0.5431));
    let cross_section_area_nm2 = r.take::<f64>("device.cross_section_area_nm2", None);
    let orbitals_per_site = r.take::<usize>("device.orbitals_per_site", Some(1));
    let alloy_fraction_x = r.take::<f64>("device.alloy_fraction_x", Some(0.0));
    let disorder_mode_s = r.take::<String>("device.disorder_mode", Some("random".into()));
    let rng_seed = r.take::<u64>("device.rng_seed", Some(1));
    let roughness_amplitude = r.take::<usize>("device.roughness_amplitude_layers", Some(0));
    let roughness_corr = r.take::<f64>("device.roughness_correlation_length_nm", Some(1.0));
    let roughness_seed = r.take::<u64>("device.roughness_seed", Some(1));

    let onsite_si_ev = r.take::<f64>("materials.onsite_si_ev", None);
    let onsite_ge_ev = r.take::<f64>("materials.onsite_ge_ev", None);
    let hopping_si_ev = r.take::<f64>("materials.hopping_si_ev", None);
    let hopping_ge_ev = r.take::<f64>("materials.hopping_ge_ev", None);
    let hopping_sige_ev = r.take::<f64>("materials.hopping_sige_ev", None);

    let d_acoustic_ev = r.take::<f64>("scattering.d_acoustic_ev", None);
    let sound_velocity = r.take::<f64>("scattering.sound_velocity_nm_ps", None);
    let debye_energy_ev = r.take::<f64>("scattering.debye_energy_ev", None);
    let optical_energy_ev = r.take::<f64>("scattering.optical_energy_ev", None);
    let d_optical_ev_nm = r.take::<f64>("scattering.d_optical_ev_nm", None);
    let mass_density = r.take::<f64>("scattering.mass_density_amu_nm3", None);
    let temperature_k = r.take::<f64>("scattering.temperature_k", Some(300.0));

    let e_min_ev = r.take::<f64>("grid.e_min_ev", None);
    let e_max_ev = r.take::<f64>("grid.e_max_ev", None);
    let points_per_eop = r.take::<usize>("grid.points_per_eop", Some(2));
    let n_momenta = r.take::<usize>("grid.n_momenta", Some(4));
    let grid_mode_s = r.take::<String>("grid.mode", Some("homogeneous".into()));
    let adaptive_budget = r.take::<usize>("grid.adaptive_budget", Some(0));

    let gate_voltages_v = r.take_list_f64("bias.gate_voltages_v", None);
    let drain_voltage_v = r.take::<f64>("bias.drain_voltage_v", None);
    let mu_source_ev = r.take::<f64>("bias.mu_source_ev", None);
    let mu_drain_ev = r.take::<f64>("bias.mu_drain_ev", None);

    let born_tolerance_ev = r.take::<f64>("solver.born_tolerance_ev", Some(1e-6));
    let born_max_iterations = r.take::<usize>("solver.born_max_iterations", Some(50));
    let born_mixing = r.take::<f64>("solver.born_mixing", Some(1.0));
    let outer_tolerance_v = r.take::<f64>("solver.outer_tolerance_v", Some(1e-4));
    let outer_max_iterations = r.take::<usize>("solver.outer_max_iterations", Some(60));
    let outer_mixing = r.take::<f64>("solver.outer_mixing", Some(0.3));
    let workers = r.take::<usize>("solver.workers", Some(1));

    let eps_semiconductor = r.take::<f64>("poisson.eps_semiconductor", Some(11.7));
    let eps_oxide = r.take::<f64>("poisson.eps_oxide", Some(3.9));
    let n_oxide_rows = r.take::<usize>("poisson.n_oxide_rows", Some(2));
    let doping = r.take::<f64>("poisson.doping_n_d_per_nm3", Some(0.0));

    let ensemble = if r.entries.contains_key("ensemble.n_samples")
        || r.entries.contains_key("ensemble.base_seed")
    {
        let n_samples = r.take::<usize>("ensemble.n_samples", None);
        let base_seed = r.take::<u64>("ensemble.base_seed", Some(1));
        n_samples.zip(base_seed).map(|(n_samples, base_seed)| EnsembleSettings {
            n_samples,
            base_seed,
        })
    } else {
        None
    };

    let output_dir = r.take::<String>("output.dir", Some("out".into()));
    let disorder_mode = match disorder_mode_s.as_deref() {
        Some("random") => DisorderMode::Random,
        Some("vca") => DisorderMode::Vca,
        Some(other) => {
            r.errors.push(ConfigError {
                line: 0,
                message: format!(
                    "device.disorder_mode must be `random` or `vca`, got `{other}`"
                ),
            });
            DisorderMode::Random
        }
        None => DisorderMode::Random,
    };
    let grid_mode = match grid_mode_s.as_deref() {
        Some("homogeneous") => GridMode::Homogeneous,
        Some("adaptive") => GridMode::Adaptive,
        Some(other) => {
            r.errors.push(ConfigError {
                line: 0,
                message: format!("grid.mode must be `homogeneous` or `adaptive`, got `{other}`"),
            });
            GridMode::Homogeneous
        }
        None => GridMode::Homogeneous,
    };

    for (key, (line, _)) in &raw.entries {
        raw.errors.push(ConfigError {
            line: *line,
            message: format!("unknown key `{key}`"),
        });
    }

    if !raw.errors.is_empty() {
        return Err(raw.errors);
    }

    // All keys parsed; unwraps below are safe because missing required keys
    // were recorded as errors above.
    let roughness = match roughness_amplitude.unwrap() {
        0 => None,
        amplitude => Some(RoughnessSpec {
            amplitude,
            correlation_length_nm: roughness_corr.unwrap(),
            seed: roughness_seed.unwrap(),
        }),
    };
    let cfg = RunConfig {
        device: DeviceSpec {
            n_slabs: n_slabs.unwrap(),
            sites_per_slab: sites_per_slab.unwrap(),
            lattice_constant_nm: lattice_constant_nm.unwrap(),
            cross_section_area_nm2: cross_section_area_nm2.unwrap(),
            orbitals_per_site: orbitals_per_site.unwrap(),
            alloy_fraction_x: alloy_fraction_x.unwrap(),
            disorder_mode,
            rng_seed: rng_seed.unwrap(),
            roughness,
        },
        materials: MaterialParams {
            onsite_si_ev: onsite_si_ev.unwrap(),
            onsite_ge_ev: onsite_ge_ev.unwrap(),
            hopping_si_ev: hopping_si_ev.unwrap(),
            hopping_ge_ev: hopping_ge_ev.unwrap(),
            hopping_sige_ev: hopping_sige_ev.unwrap(),
        },
        scattering: ScatteringParams {
            d_acoustic_ev: d_acoustic_ev.unwrap(),
            sound_velocity_nm_ps: sound_velocity.unwrap(),
            debye_energy_ev: debye_energy_ev.unwrap(),
            optical_energy_ev: optical_energy_ev.unwrap(),
            d_optical_ev_nm: d_optical_ev_nm.unwrap(),
            mass_density_amu_nm3: mass_density.unwrap(),
            area_nm2: cross_section_area_nm2.unwrap(),
            temperature_k: temperature_k.unwrap(),
        },
        grid: GridSettings {
            e_min_ev: e_min_ev.unwrap(),
            e_max_ev: e_max_ev.unwrap(),
            points_per_eop: points_per_eop.unwrap(),
            n_momenta: n_momenta.unwrap(),
            mode: grid_mode,
            adaptive_budget: adaptive_budget.unwrap(),
        },
        bias: BiasSettings {
            gate_voltages_v: gate_voltages_v.unwrap(),
            drain_voltage_v: drain_voltage_v.unwrap(),
            mu_source_ev: mu_source_ev.unwrap(),
            mu_drain_ev: mu_drain_ev.unwrap(),
        },
        solver: SolverSettings {
            born_tolerance_ev: born_tolerance_ev.unwrap(),
            born_max_iterations: born_max_iterations.unwrap(),
            born_mixing: born_mixing.unwrap(),
            outer_tolerance_v: outer_tolerance_v.unwrap(),
            outer_max_iterations: outer_max_iterations.unwrap(),
            outer_mixing: outer_mixing.unwrap(),
            workers: workers.unwrap(),
        },
        poisson: PoissonSettings {
            eps_semiconductor: eps_semiconductor.unwrap(),
            eps_oxide: eps_oxide.unwrap(),
            n_oxide_rows: n_oxide_rows.unwrap(),
            doping_n_d_per_nm3: doping.unwrap(),
        },
        ensemble,
        output_dir: output_dir.unwrap(),
    };

    let violations = validate(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(violations)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, Vec<ConfigError>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ConfigError {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        }]
    })?;
    parse_config(&text)
}

/// One-pass semantic validation: collects every violation.
pub fn validate(cfg: &RunConfig) -> Vec<ConfigError> {
    let mut v = Vec::new();
    let mut bad = |message: String| v.push(ConfigError { line: 0, message });

    if let Err(e) = cfg.device.validate() {
        bad(format!("device: {e}"));
    }
    if cfg.device.lattice_constant_nm <= 0.0 {
        bad("device.lattice_constant_nm must be positive".into());
    }
    if let Err(e) = cfg.scattering.validate() {
        bad(format!("scattering: {e}"));
    }
    if cfg.grid.e_max_ev <= cfg.grid.e_min_ev {
        bad(format!(
            "grid energy window is empty: e_min_ev = {} >= e_max_ev = {}",
            cfg.grid.e_min_ev, cfg.grid.e_max_ev
        ));
    }
    if cfg.grid.points_per_eop == 0 {
        bad("grid.points_per_eop must be >= 1".into());
    }
    if cfg.grid.n_momenta == 0 {
        bad("grid.n_momenta must be >= 1".into());
    }
    if cfg.grid.mode == GridMode::Adaptive && cfg.grid.adaptive_budget == 0 {
        bad("grid.mode = adaptive requires grid.adaptive_budget >= 1".into());
    }
    for (i, vg) in cfg.bias.gate_voltages_v.iter().enumerate() {
        if !vg.is_finite() {
            bad(format!("bias.gate_voltages_v[{i}] is not finite"));
        }
    }
    if !cfg.bias.drain_voltage_v.is_finite() {
        bad("bias.drain_voltage_v is not finite".into());
    }
    if cfg.solver.born_tolerance_ev <= 0.0 {
        bad("solver.born_tolerance_ev must be positive".into());
    }
    if cfg.solver.born_max_iterations == 0 {
        bad("solver.born_max_iterations must be >= 1".into());
    }
    if !(0.1..=1.0).contains(&cfg.solver.born_mixing) {
        bad(format!(
            "solver.born_mixing must lie in [0.1, 1.0], got {}",
            cfg.solver.born_mixing
        ));
    }
    if cfg.solver.outer_tolerance_v <= 0.0 {
        bad("solver.outer_tolerance_v must be positive".into());
    }
    if cfg.solver.outer_max_iterations == 0 {
        bad("solver.outer_max_iterations must be >= 1".into());
    }
    if !(0.0 < cfg.solver.outer_mixing && cfg.solver.outer_mixing <= 1.0) {
        bad("solver.outer_mixing must lie in (0, 1]".into());
    }
    if cfg.solver.workers == 0 {
        bad("solver.workers must be >= 1".into());
    }
    if cfg.poisson.eps_semiconductor <= 0.0 {
        bad("poisson.eps_semiconductor must be positive".into());
    }
    if cfg.poisson.eps_oxide <= 0.0 {
        bad("poisson.eps_oxide must be positive".into());
    }
    if cfg.poisson.n_oxide_rows == 0 {
        bad("poisson.n_oxide_rows must be >= 1".into());
    }
    if let Some(e) = &cfg.ensemble {
        if e.n_samples == 0 {
            bad("ensemble.n_samples must be >= 1".into());
        }
    }
    v
}

/// A complete small-device example config; every required key present.
pub fn example_config_text() -> &'static str {
    r#"# Ultra-thin-body transistor, small benchmark
[device]
n_slabs = 20
sites_per_slab = 12
lattice_constant_nm = 0.5431
cross_section_area_nm2 = 0.295
orbitals_per_site = 1
alloy_fraction_x = 0.2
disorder_mode = random
rng_seed = 7

[materials]
onsite_si_ev = 0.0
onsite_ge_ev = -0.08
hopping_si_ev = -1.0
hopping_ge_ev = -0.95
hopping_sige_ev = -0.97

[scattering]
d_acoustic_ev = 9.0
sound_velocity_nm_ps = 8.433
debye_energy_ev = 0.055
optical_energy_ev = 0.062
d_optical_ev_nm = 80.0
mass_density_amu_nm3 = 24400.0
temperature_k = 300.0

[grid]
e_min_ev = -2.4
e_max_ev = -1.4
points_per_eop = 2
n_momenta = 4
mode = homogeneous

[bias]
gate_voltages_v = 0.0, 0.1, 0.2, 0.3, 0.4
drain_voltage_v = 0.05
mu_source_ev = -1.95
mu_drain_ev = -2.00

[solver]
born_tolerance_ev = 1e-6
born_max_iterations = 50
born_mixing = 1.0
outer_tolerance_v = 1e-3
outer_max_iterations = 40
outer_mixing = 0.3
workers = 1

[poisson]
eps_semiconductor = 11.7
eps_oxide = 3.9
n_oxide_rows = 2
doping_n_d_per_nm3 = 0.0

[output]
dir = out
"#
}
