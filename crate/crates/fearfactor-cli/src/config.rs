//! Run configuration: defaults, the flat key=value config file, and flag
//! overrides.
//!
//! Precedence is defaults < config file < command-line flags. Defaults
//! follow the reference estimation choices: 252-day rolling windows,
//! quintile sorts, Newey-West with 12 lags, and the 23–37 day option
//! maturity window targeting 30 days.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::errors::{validation, CliError};

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Output directory for artifacts, tables, and manifests.
    pub out: PathBuf,
    /// options.csv file or a directory of option CSV files.
    pub options: PathBuf,
    pub stocks: PathBuf,
    pub rates: PathBuf,
    /// Monthly style-factor file used for alpha regressions.
    pub ff: PathBuf,
    pub seed: u64,
    pub n_firms: usize,
    pub n_stocks: usize,
    pub n_days: usize,
    /// Embedded synthetic factor premium, percent per month.
    pub premium: f64,
    pub factor_window: usize,
    pub beta_window: usize,
    /// Stride between factor-window ends, in trading days.
    pub step: usize,
    pub min_coverage: f64,
    pub n_quantiles: usize,
    pub nw_lags: usize,
    pub maturity_min: i64,
    pub maturity_max: i64,
    pub maturity_target: i64,
    pub min_quotes: usize,
    pub min_obs: usize,
    /// Comma-separated factor names to extract from the variance panel.
    pub family: String,
    /// Factor driving beta estimation, sorts, and pricing stages.
    pub factor: String,
    /// Beta-regression control: "market" or "none".
    pub control: String,
    pub weighting: String,
    pub scheme: String,
    /// Factor model for alpha regressions and the generic two-pass mode.
    pub model: String,
    /// Latent-factor count for the three-pass estimator; None = automatic.
    pub n_latent: Option<usize>,
    /// Generic-mode test-asset matrix (wide CSV). When set, fmb/threepass
    /// run on it instead of the pipeline artifacts.
    pub assets: Option<PathBuf>,
    /// Generic-mode pricing factors (monthly style-factor schema).
    pub factors_csv: Option<PathBuf>,
    /// Generic-mode observable factor (wide CSV, first column).
    pub observable: Option<PathBuf>,
    /// Generic-mode market factor (wide CSV, first column).
    pub market: Option<PathBuf>,
}

/// Flags shared by every subcommand, mirroring the config keys kebab-cased.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigFlags {
    /// Flat key=value config file; flags override its entries
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and manifests [default: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Option quotes CSV file, or a directory of such files [default: <out>/options.csv]
    #[arg(long, value_name = "PATH")]
    pub options: Option<PathBuf>,
    /// Stock panel CSV [default: <out>/stocks.csv]
    #[arg(long, value_name = "PATH")]
    pub stocks: Option<PathBuf>,
    /// Risk-free rate CSV [default: <out>/rates.csv]
    #[arg(long, value_name = "PATH")]
    pub rates: Option<PathBuf>,
    /// Monthly style-factor CSV for alpha regressions [default: <out>/ff_factors.csv]
    #[arg(long, value_name = "PATH")]
    pub ff: Option<PathBuf>,
    /// Generator seed [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic option-underlying firm count [default: 30]
    #[arg(long, value_name = "N")]
    pub n_firms: Option<usize>,
    /// Synthetic stock count [default: 150]
    #[arg(long, value_name = "N")]
    pub n_stocks: Option<usize>,
    /// Synthetic trading-day count [default: 1260]
    #[arg(long, value_name = "N")]
    pub n_days: Option<usize>,
    /// Synthetic factor premium, percent per month [default: -0.40]
    #[arg(long, value_name = "PCT", allow_hyphen_values = true)]
    pub premium: Option<f64>,
    /// Rolling factor-extraction window, trading days [default: 252]
    #[arg(long, value_name = "DAYS")]
    pub factor_window: Option<usize>,
    /// Rolling beta-estimation window, trading days [default: 252]
    #[arg(long, value_name = "DAYS")]
    pub beta_window: Option<usize>,
    /// Stride between factor-window ends [default: 1]
    #[arg(long, value_name = "DAYS")]
    pub step: Option<usize>,
    /// Minimum in-window coverage for a firm to enter extraction [default: 0.8]
    #[arg(long, value_name = "FRAC")]
    pub min_coverage: Option<f64>,
    /// Number of sort quantiles [default: 5]
    #[arg(long, value_name = "Q")]
    pub n_quantiles: Option<usize>,
    /// Newey-West lag count [default: 12]
    #[arg(long, value_name = "LAGS")]
    pub nw_lags: Option<usize>,
    /// Minimum option maturity, calendar days [default: 23]
    #[arg(long, value_name = "DAYS")]
    pub maturity_min: Option<i64>,
    /// Maximum option maturity, calendar days [default: 37]
    #[arg(long, value_name = "DAYS")]
    pub maturity_max: Option<i64>,
    /// Target option maturity, calendar days [default: 30]
    #[arg(long, value_name = "DAYS")]
    pub maturity_target: Option<i64>,
    /// Minimum surviving quotes per chain [default: 4]
    #[arg(long, value_name = "N")]
    pub min_quotes: Option<usize>,
    /// Minimum observations per beta regression [default: 200]
    #[arg(long, value_name = "N")]
    pub min_obs: Option<usize>,
    /// Comma-separated factors to extract [default: CF,CF_plus,CF_minus]
    #[arg(long, value_name = "LIST")]
    pub family: Option<String>,
    /// Factor for betas, sorts, and pricing [default: CF_minus]
    #[arg(long, value_name = "NAME")]
    pub factor: Option<String>,
    /// Beta-regression control: market or none [default: market]
    #[arg(long, value_name = "NAME")]
    pub control: Option<String>,
    /// Portfolio weighting: value or equal [default: value]
    #[arg(long, value_name = "KIND")]
    pub weighting: Option<String>,
    /// Sort scheme: single, controlled, conditional_double, unconditional_double [default: single]
    #[arg(long, value_name = "KIND")]
    pub scheme: Option<String>,
    /// Alpha-regression factor model: ff5 or ff5_mom [default: ff5]
    #[arg(long, value_name = "KIND")]
    pub model: Option<String>,
    /// Three-pass latent-factor count: an integer or "auto" [default: auto]
    #[arg(long, value_name = "N")]
    pub n_latent: Option<String>,
    /// Test-asset matrix (wide CSV) for generic fmb/threepass runs
    #[arg(long, value_name = "PATH")]
    pub assets: Option<PathBuf>,
    /// Pricing-factor CSV (style-factor schema) for generic fmb runs
    #[arg(long, value_name = "PATH")]
    pub factors_csv: Option<PathBuf>,
    /// Observable-factor series (wide CSV) for generic threepass runs
    #[arg(long, value_name = "PATH")]
    pub observable: Option<PathBuf>,
    /// Market-factor series (wide CSV) for generic threepass runs
    #[arg(long, value_name = "PATH")]
    pub market: Option<PathBuf>,
}

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| validation(format!("config key '{key}': cannot parse '{value}'")))
}

fn parse_n_latent(value: &str) -> Result<Option<usize>, CliError> {
    let v = value.trim();
    if v.is_empty() || v == "auto" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| validation(format!("n_latent must be an integer or 'auto', got '{v}'")))
}

/// Parse a flat key=value config file. '#' starts a comment; blank lines
/// are ignored; unknown keys are rejected.
pub fn parse_config_file(path: &std::path::Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(validation(format!(
                "{}:{}: expected key=value, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

const KNOWN_KEYS: &[&str] = &[
    "out",
    "options",
    "stocks",
    "rates",
    "ff",
    "seed",
    "n_firms",
    "n_stocks",
    "n_days",
    "premium",
    "factor_window",
    "beta_window",
    "step",
    "min_coverage",
    "n_quantiles",
    "nw_lags",
    "maturity_min",
    "maturity_max",
    "maturity_target",
    "min_quotes",
    "min_obs",
    "family",
    "factor",
    "control",
    "weighting",
    "scheme",
    "model",
    "n_latent",
    "assets",
    "factors_csv",
    "observable",
    "market",
];

impl RunConfig {
    /// Merge defaults, the optional config file, and flags, then validate
    /// the combined values.
    pub fn resolve(flags: &ConfigFlags) -> Result<RunConfig, CliError> {
        let file = match &flags.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        for key in file.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(validation(format!("unknown config key '{key}'")));
            }
        }
        let get = |key: &str| file.get(key).map(String::as_str);

        let out: PathBuf = flags
            .out
            .clone()
            .or_else(|| get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let path_key = |flag: &Option<PathBuf>, key: &str, default_name: &str| -> PathBuf {
            flag.clone()
                .or_else(|| get(key).map(PathBuf::from))
                .unwrap_or_else(|| out.join(default_name))
        };
        let opt_path_key = |flag: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
            flag.clone().or_else(|| get(key).map(PathBuf::from))
        };

        macro_rules! scalar {
            ($flag:expr, $key:literal, $default:expr) => {
                match $flag {
                    Some(v) => v,
                    None => match get($key) {
                        Some(s) => parse_key($key, s)?,
                        None => $default,
                    },
                }
            };
        }

        let n_latent = match &flags.n_latent {
            Some(v) => parse_n_latent(v)?,
            None => match get("n_latent") {
                Some(s) => parse_n_latent(s)?,
                None => None,
            },
        };

        let cfg = RunConfig {
            options: path_key(&flags.options, "options", "options.csv"),
            stocks: path_key(&flags.stocks, "stocks", "stocks.csv"),
            rates: path_key(&flags.rates, "rates", "rates.csv"),
            ff: path_key(&flags.ff, "ff", "ff_factors.csv"),
            seed: scalar!(flags.seed, "seed", 1),
            n_firms: scalar!(flags.n_firms, "n_firms", 30),
            n_stocks: scalar!(flags.n_stocks, "n_stocks", 150),
            n_days: scalar!(flags.n_days, "n_days", 1260),
            premium: scalar!(flags.premium, "premium", -0.40),
            factor_window: scalar!(flags.factor_window, "factor_window", 252),
            beta_window: scalar!(flags.beta_window, "beta_window", 252),
            step: scalar!(flags.step, "step", 1),
            min_coverage: scalar!(flags.min_coverage, "min_coverage", 0.8),
            n_quantiles: scalar!(flags.n_quantiles, "n_quantiles", 5),
            nw_lags: scalar!(flags.nw_lags, "nw_lags", 12),
            maturity_min: scalar!(flags.maturity_min, "maturity_min", 23),
            maturity_max: scalar!(flags.maturity_max, "maturity_max", 37),
            maturity_target: scalar!(flags.maturity_target, "maturity_target", 30),
            min_quotes: scalar!(flags.min_quotes, "min_quotes", 4),
            min_obs: scalar!(flags.min_obs, "min_obs", 200),
            family: flags
                .family
                .clone()
                .or_else(|| get("family").map(String::from))
                .unwrap_or_else(|| "CF,CF_plus,CF_minus".to_string()),
            factor: flags
                .factor
                .clone()
                .or_else(|| get("factor").map(String::from))
                .unwrap_or_else(|| "CF_minus".to_string()),
            control: flags
                .control
                .clone()
                .or_else(|| get("control").map(String::from))
                .unwrap_or_else(|| "market".to_string()),
            weighting: flags
                .weighting
                .clone()
                .or_else(|| get("weighting").map(String::from))
                .unwrap_or_else(|| "value".to_string()),
            scheme: flags
                .scheme
                .clone()
                .or_else(|| get("scheme").map(String::from))
                .unwrap_or_else(|| "single".to_string()),
            model: flags
                .model
                .clone()
                .or_else(|| get("model").map(String::from))
                .unwrap_or_else(|| "ff5".to_string()),
            n_latent,
            assets: opt_path_key(&flags.assets, "assets"),
            factors_csv: opt_path_key(&flags.factors_csv, "factors_csv"),
            observable: opt_path_key(&flags.observable, "observable"),
            market: opt_path_key(&flags.market, "market"),
            out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.n_quantiles < 2 {
            return Err(validation("n_quantiles must be at least 2"));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return Err(validation("min_coverage must be in (0, 1]"));
        }
        if self.step == 0 {
            return Err(validation("step must be positive"));
        }
        if self.factor_window == 0 || self.beta_window == 0 {
            return Err(validation("window lengths must be positive"));
        }
        if !(self.maturity_min <= self.maturity_target
            && self.maturity_target <= self.maturity_max)
        {
            return Err(validation(
                "maturity window must satisfy min <= target <= max",
            ));
        }
        for name in self.family_members() {
            if fearfactor::factor_extraction::FactorName::parse(&name).is_none() {
                return Err(validation(format!("unknown factor name '{name}' in family")));
            }
        }
        if fearfactor::factor_extraction::FactorName::parse(&self.factor).is_none() {
            return Err(validation(format!("unknown factor '{}'", self.factor)));
        }
        if !matches!(self.control.as_str(), "market" | "none") {
            return Err(validation(format!(
                "control must be 'market' or 'none', got '{}'",
                self.control
            )));
        }
        if fearfactor::portfolio::SortScheme::parse(&self.scheme).is_none() {
            return Err(validation(format!("unknown sort scheme '{}'", self.scheme)));
        }
        if !matches!(self.weighting.as_str(), "value" | "equal") {
            return Err(validation(format!(
                "weighting must be 'value' or 'equal', got '{}'",
                self.weighting
            )));
        }
        if !matches!(self.model.as_str(), "ff5" | "ff5_mom") {
            return Err(validation(format!(
                "model must be 'ff5' or 'ff5_mom', got '{}'",
                self.model
            )));
        }
        Ok(())
    }

    pub fn family_members(&self) -> Vec<String> {
        self.family
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    pub fn weighting_kind(&self) -> fearfactor::portfolio::Weighting {
        match self.weighting.as_str() {
            "equal" => fearfactor::portfolio::Weighting::Equal,
            _ => fearfactor::portfolio::Weighting::Value,
        }
    }

    pub fn scheme_kind(&self) -> fearfactor::portfolio::SortScheme {
        fearfactor::portfolio::SortScheme::parse(&self.scheme).expect("validated")
    }

    pub fn model_kind(&self) -> fearfactor::portfolio::FactorModel {
        match self.model.as_str() {
            "ff5_mom" => fearfactor::portfolio::FactorModel::Ff5Mom,
            _ => fearfactor::portfolio::FactorModel::Ff5,
        }
    }

    /// Every effective setting as (key, value) pairs, echoed into manifests.
    pub fn echo(&self) -> Vec<(String, String)> {
        let p = |v: &PathBuf| v.display().to_string();
        let o = |v: &Option<PathBuf>| {
            v.as_ref()
                .map(|v| v.display().to_string())
                .unwrap_or_default()
        };
        vec![
            ("out".into(), p(&self.out)),
            ("options".into(), p(&self.options)),
            ("stocks".into(), p(&self.stocks)),
            ("rates".into(), p(&self.rates)),
            ("ff".into(), p(&self.ff)),
            ("seed".into(), self.seed.to_string()),
            ("n_firms".into(), self.n_firms.to_string()),
            ("n_stocks".into(), self.n_stocks.to_string()),
            ("n_days".into(), self.n_days.to_string()),
            ("premium".into(), format!("{}", self.premium)),
            ("factor_window".into(), self.factor_window.to_string()),
            ("beta_window".into(), self.beta_window.to_string()),
            ("step".into(), self.step.to_string()),
            ("min_coverage".into(), format!("{}", self.min_coverage)),
            ("n_quantiles".into(), self.n_quantiles.to_string()),
            ("nw_lags".into(), self.nw_lags.to_string()),
            ("maturity_min".into(), self.maturity_min.to_string()),
            ("maturity_max".into(), self.maturity_max.to_string()),
            ("maturity_target".into(), self.maturity_target.to_string()),
            ("min_quotes".into(), self.min_quotes.to_string()),
            ("min_obs".into(), self.min_obs.to_string()),
            ("family".into(), self.family.clone()),
            ("factor".into(), self.factor.clone()),
            ("control".into(), self.control.clone()),
            ("weighting".into(), self.weighting.clone()),
            ("scheme".into(), self.scheme.clone()),
            ("model".into(), self.model.clone()),
            (
                "n_latent".into(),
                self.n_latent
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "auto".to_string()),
            ),
            ("assets".into(), o(&self.assets)),
            ("factors_csv".into(), o(&self.factors_csv)),
            ("observable".into(), o(&self.observable)),
            ("market".into(), o(&self.market)),
        ]
    }

    // Derived artifact paths inside the output directory.
    pub fn variance_panel_path(&self) -> PathBuf {
        self.out.join("variance_panel.csv")
    }
    pub fn factors_path(&self) -> PathBuf {
        self.out.join("factors.csv")
    }
    pub fn betas_path(&self) -> PathBuf {
        self.out.join("betas.csv")
    }
    pub fn portfolios_path(&self) -> PathBuf {
        self.out.join("portfolios.csv")
    }
    pub fn portfolios_daily_path(&self) -> PathBuf {
        self.out.join("portfolios_daily.csv")
    }
    pub fn premia_path(&self) -> PathBuf {
        self.out.join("premia.csv")
    }
    pub fn tables_dir(&self) -> PathBuf {
        self.out.join("tables")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_inside_out_dir() {
        let cfg = RunConfig::resolve(&ConfigFlags::default()).unwrap();
        assert_eq!(cfg.out, PathBuf::from("out"));
        assert_eq!(cfg.options, PathBuf::from("out/options.csv"));
        assert_eq!(cfg.n_quantiles, 5);
        assert_eq!(cfg.nw_lags, 12);
        assert_eq!(cfg.factor_window, 252);
        assert_eq!(cfg.maturity_min, 23);
        assert_eq!(cfg.maturity_max, 37);
        assert_eq!(cfg.factor, "CF_minus");
        assert_eq!(cfg.n_latent, None);
    }

    #[test]
    fn config_file_overrides_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nn_quantiles = 10\nseed=99\nfactor=CF\nn_latent=3\n",
        )
        .unwrap();
        let flags = ConfigFlags {
            config: Some(path),
            seed: Some(7),
            ..ConfigFlags::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.n_quantiles, 10);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.factor, "CF");
        assert_eq!(cfg.n_latent, Some(3));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "quantiles=5\n").unwrap();
        let flags = ConfigFlags {
            config: Some(path),
            ..ConfigFlags::default()
        };
        assert!(matches!(
            RunConfig::resolve(&flags),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn bad_enum_values_are_rejected() {
        for (field, value) in [
            ("factor", "XX"),
            ("control", "beta"),
            ("scheme", "triple"),
            ("weighting", "cap"),
            ("model", "capm"),
        ] {
            let mut flags = ConfigFlags::default();
            match field {
                "factor" => flags.factor = Some(value.into()),
                "control" => flags.control = Some(value.into()),
                "scheme" => flags.scheme = Some(value.into()),
                "weighting" => flags.weighting = Some(value.into()),
                _ => flags.model = Some(value.into()),
            }
            assert!(
                matches!(RunConfig::resolve(&flags), Err(CliError::Validation(_))),
                "{field}={value} should be rejected"
            );
        }
    }
}
