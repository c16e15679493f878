//! Panel data model: entities observed over semester periods with typed
//! columns, and construction of lag-window supervised rows (three
//! consecutive periods of features, fourth-period risk label as target).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of risk classes. Labels run 1..=5, 1 = low risk, 5 = high risk.
pub const N_CLASSES: usize = 5;

/// Default lag-window length: three consecutive periods of history.
pub const DEFAULT_WINDOW: usize = 3;

/// Semester counter: `year * 2 + semester - 1`, so "2016-1" -> 4032 and
/// consecutive semesters differ by exactly 1.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct PeriodIndex(pub u32);

impl PeriodIndex {
    pub fn from_year_semester(year: u32, semester: u32) -> Self {
        PeriodIndex(year * 2 + semester - 1)
    }

    pub fn year(self) -> u32 {
        self.0 / 2
    }

    /// 1 or 2.
    pub fn semester(self) -> u32 {
        self.0 % 2 + 1
    }

    pub fn succ(self) -> Self {
        PeriodIndex(self.0 + 1)
    }
}

impl fmt::Display for PeriodIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.year(), self.semester())
    }
}

/// Parses "YYYY-S" with S in {1,2}.
pub fn parse_period(text: &str) -> Result<PeriodIndex> {
    let err = || Error::PeriodParse {
        text: text.to_string(),
    };
    let (year, sem) = text.split_once('-').ok_or_else(err)?;
    if year.len() != 4 || !year.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let year: u32 = year.parse().map_err(|_| err())?;
    let sem: u32 = match sem {
        "1" => 1,
        "2" => 2,
        _ => return Err(err()),
    };
    Ok(PeriodIndex::from_year_semester(year, sem))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Identifier,
    Period,
    Categorical,
    Continuous,
    Count,
    Target,
}

/// One column of the panel schema. `derived_from` marks variation columns
/// that are computed from a base column by the preprocessing stage rather
/// than read from the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default = "default_true")]
    pub nullable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

fn default_true() -> bool {
    true
}

impl ColumnDef {
    fn new(name: &str, kind: ColumnKind) -> Self {
        ColumnDef {
            name: name.to_string(),
            kind,
            categories: None,
            nullable: true,
            derived_from: None,
        }
    }

    fn with_categories(mut self, cats: &[&str]) -> Self {
        self.categories = Some(cats.iter().map(|s| s.to_string()).collect());
        self
    }

    fn derived(mut self, base: &str) -> Self {
        self.derived_from = Some(base.to_string());
        self
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, ColumnKind::Continuous | ColumnKind::Count)
    }
}

/// Column schema for a panel dataset: exactly one identifier, one period and
/// one target column; names unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ColumnDef>", into = "Vec<ColumnDef>")]
pub struct ColumnSchema {
    columns: Vec<ColumnDef>,
}

impl TryFrom<Vec<ColumnDef>> for ColumnSchema {
    type Error = Error;
    fn try_from(columns: Vec<ColumnDef>) -> Result<Self> {
        ColumnSchema::new(columns)
    }
}

impl From<ColumnSchema> for Vec<ColumnDef> {
    fn from(s: ColumnSchema) -> Self {
        s.columns
    }
}

impl ColumnSchema {
    pub fn new(columns: Vec<ColumnDef>) -> Result<Self> {
        let mut names = std::collections::BTreeSet::new();
        for c in &columns {
            if !names.insert(c.name.clone()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
        }
        for (kind, label) in [
            (ColumnKind::Identifier, "identifier"),
            (ColumnKind::Period, "period"),
            (ColumnKind::Target, "target"),
        ] {
            let n = columns.iter().filter(|c| c.kind == kind).count();
            if n != 1 {
                return Err(Error::Schema(format!(
                    "schema must have exactly one {label} column, found {n}"
                )));
            }
        }
        for c in &columns {
            if let Some(base) = &c.derived_from {
                if !columns.iter().any(|b| &b.name == base && b.is_numeric()) {
                    return Err(Error::Schema(format!(
                        "derived column `{}` references unknown numeric base `{base}`",
                        c.name
                    )));
                }
            }
        }
        Ok(ColumnSchema { columns })
    }

    pub fn columns(&self) -> &[ColumnDef] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn identifier_column(&self) -> &ColumnDef {
        self.columns
            .iter()
            .find(|c| c.kind == ColumnKind::Identifier)
            .expect("validated")
    }

    pub fn period_column(&self) -> &ColumnDef {
        self.columns
            .iter()
            .find(|c| c.kind == ColumnKind::Period)
            .expect("validated")
    }

    pub fn target_column(&self) -> &ColumnDef {
        self.columns
            .iter()
            .find(|c| c.kind == ColumnKind::Target)
            .expect("validated")
    }

    /// Columns carried by input records, in schema order: categorical,
    /// continuous and count columns that are not derived.
    pub fn input_columns(&self) -> impl Iterator<Item = &ColumnDef> {
        self.columns.iter().filter(|c| {
            c.derived_from.is_none()
                && matches!(
                    c.kind,
                    ColumnKind::Categorical | ColumnKind::Continuous | ColumnKind::Count
                )
        })
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.input_columns().position(|c| c.name == name)
    }

    pub fn n_inputs(&self) -> usize {
        self.input_columns().count()
    }

    /// Variation columns: (derived column, base input column) pairs.
    pub fn variation_columns(&self) -> impl Iterator<Item = (&ColumnDef, &str)> {
        self.columns
            .iter()
            .filter_map(|c| c.derived_from.as_deref().map(|b| (c, b)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Names of the CAMELS / risk-rating columns, only included in the M3
/// feature set.
pub const CAMELS_COLUMNS: [&str; 7] = [
    "consolidated_risk_rating",
    "risk_rating",
    "camel_rating",
    "credit_risk",
    "liquidity_risk",
    "operational_risk",
    "sarassoft_risk",
];

/// Default schema covering the full variable list: descriptive and
/// chart-of-account columns, CAMELS/risk ratings, and the derived
/// period-over-period variation columns.
pub fn filing_schema() -> ColumnSchema {
    use ColumnKind::*;
    let mut cols = vec![
        ColumnDef::new("entity_id", Identifier),
        ColumnDef::new("period", Period),
        // Descriptive variables.
        ColumnDef::new("type_of_organization", Categorical),
        ColumnDef::new("legal_nature", Categorical)
            .with_categories(&["cooperative", "employee_fund", "mutual_association", "other"]),
        ColumnDef::new("company_type", Categorical)
            .with_categories(&["multi_active", "employee_fund", "specialized", "other"]),
        ColumnDef::new("supervision_level", Categorical).with_categories(&["1", "2", "3"]),
        ColumnDef::new("niif_group", Categorical),
        ColumnDef::new("department", Categorical),
        ColumnDef::new("municipality", Categorical),
        ColumnDef::new("organization_category", Categorical),
        ColumnDef::new("associates_count", Count),
        ColumnDef::new("employees_count", Count),
        ColumnDef::new("offices_count", Count),
        ColumnDef::new("correspondents_count", Count),
        ColumnDef::new("savers_count", Count),
        ColumnDef::new("debtors_count", Count),
        // Chart of accounts.
        ColumnDef::new("total_assets", Continuous),
        ColumnDef::new("client_portfolio", Continuous),
        ColumnDef::new("net_client_portfolio", Continuous),
        ColumnDef::new("consumer_portfolio", Continuous),
        ColumnDef::new("housing_portfolio", Continuous),
        ColumnDef::new("commercial_portfolio", Continuous),
        ColumnDef::new("micro_portfolio", Continuous),
        ColumnDef::new("total_investments", Continuous),
        ColumnDef::new("covenant_receivables", Continuous),
        ColumnDef::new("total_liabilities", Continuous),
        ColumnDef::new("total_deposits", Continuous),
        ColumnDef::new("bank_account_deposits", Continuous),
        ColumnDef::new("cdt_deposits", Continuous),
        ColumnDef::new("contractual_deposits", Continuous),
        ColumnDef::new("permanent_savings_deposits", Continuous),
        ColumnDef::new("total_equity", Continuous),
        ColumnDef::new("social_contributions", Continuous),
        ColumnDef::new("total_surplus", Continuous),
        ColumnDef::new("total_income", Continuous),
        ColumnDef::new("total_expenses", Continuous),
        ColumnDef::new("gross_portfolio", Continuous),
        ColumnDef::new("past_due_portfolio", Continuous),
        ColumnDef::new("female_members_count", Count),
        ColumnDef::new("male_members_count", Count),
        ColumnDef::new("other_members_count", Count),
        // CAMELS / risk ratings, consumed as inputs.
        ColumnDef::new("consolidated_risk_rating", Count),
        ColumnDef::new("risk_rating", Count),
        ColumnDef::new("camel_rating", Count),
        ColumnDef::new("credit_risk", Count),
        ColumnDef::new("liquidity_risk", Count),
        ColumnDef::new("operational_risk", Count),
        ColumnDef::new("sarassoft_risk", Count),
        ColumnDef::new("total_capital", Continuous),
        ColumnDef::new("administration_expenses", Continuous),
        ColumnDef::new("profitability", Continuous),
        ColumnDef::new("liquidity", Continuous),
    ];
    // Derived variation-between-periods columns.
    let variations: [(&str, &str); 28] = [
        ("variation_associates", "associates_count"),
        ("variation_employees", "employees_count"),
        ("variation_offices", "offices_count"),
        ("variation_savers", "savers_count"),
        ("variation_debtors", "debtors_count"),
        ("variation_total_assets", "total_assets"),
        ("variation_gross_portfolio", "gross_portfolio"),
        ("variation_consumer_portfolio", "consumer_portfolio"),
        ("variation_housing_portfolio", "housing_portfolio"),
        ("variation_commercial_portfolio", "commercial_portfolio"),
        ("variation_micro_portfolio", "micro_portfolio"),
        ("variation_investments", "total_investments"),
        ("variation_covenant_receivables", "covenant_receivables"),
        ("variation_liabilities", "total_liabilities"),
        ("variation_deposits", "total_deposits"),
        ("variation_demand_deposits", "bank_account_deposits"),
        ("variation_cdt_deposits", "cdt_deposits"),
        ("variation_contractual_deposits", "contractual_deposits"),
        (
            "variation_permanent_savings_deposits",
            "permanent_savings_deposits",
        ),
        ("variation_equity", "total_equity"),
        ("variation_social_contributions", "social_contributions"),
        ("variation_surplus", "total_surplus"),
        ("variation_income", "total_income"),
        ("variation_expenses", "total_expenses"),
        ("variation_past_due_portfolio", "past_due_portfolio"),
        ("variation_female_members", "female_members_count"),
        ("variation_male_members", "male_members_count"),
        ("variation_other_members", "other_members_count"),
    ];
    for (name, base) in variations {
        cols.push(ColumnDef::new(name, Continuous).derived(base));
    }
    cols.push(ColumnDef::new("risk_weighting", Target));
    ColumnSchema::new(cols).expect("default schema is valid")
}

/// A typed cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Category(String),
    Missing,
}

impl Value {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

/// One SEE filing for one semester. `values` is aligned with the schema's
/// `input_columns()` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPeriodRecord {
    pub entity_id: String,
    pub period: PeriodIndex,
    pub values: Vec<Value>,
    pub risk_label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub schema: ColumnSchema,
    pub records: Vec<EntityPeriodRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    LabelRange,
    DuplicateKey,
    WrongType,
    DisallowedCategory,
    WidthMismatch,
}

/// One data-quality finding from `validate_dataset`. Violations are data,
/// not failures.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub entity_id: String,
    pub period: PeriodIndex,
    pub column: Option<String>,
    pub message: String,
}

pub fn validate_dataset(data: &PanelDataset) -> Vec<Violation> {
    let mut violations = Vec::new();
    let inputs: Vec<&ColumnDef> = data.schema.input_columns().collect();
    let mut seen = std::collections::BTreeSet::new();
    for rec in &data.records {
        if !seen.insert((rec.entity_id.clone(), rec.period)) {
            violations.push(Violation {
                kind: ViolationKind::DuplicateKey,
                entity_id: rec.entity_id.clone(),
                period: rec.period,
                column: None,
                message: format!(
                    "duplicate record for entity `{}` period {}",
                    rec.entity_id, rec.period
                ),
            });
        }
        if let Some(label) = rec.risk_label {
            if !(1..=N_CLASSES as u8).contains(&label) {
                violations.push(Violation {
                    kind: ViolationKind::LabelRange,
                    entity_id: rec.entity_id.clone(),
                    period: rec.period,
                    column: Some(data.schema.target_column().name.clone()),
                    message: format!("risk label {label} outside 1..=5"),
                });
            }
        }
        if rec.values.len() != inputs.len() {
            violations.push(Violation {
                kind: ViolationKind::WidthMismatch,
                entity_id: rec.entity_id.clone(),
                period: rec.period,
                column: None,
                message: format!(
                    "record has {} values, schema expects {}",
                    rec.values.len(),
                    inputs.len()
                ),
            });
            continue;
        }
        for (col, value) in inputs.iter().zip(&rec.values) {
            match (col.kind, value) {
                (_, Value::Missing) => {}
                (ColumnKind::Categorical, Value::Category(tok)) => {
                    if let Some(allowed) = &col.categories {
                        if !allowed.contains(tok) {
                            violations.push(Violation {
                                kind: ViolationKind::DisallowedCategory,
                                entity_id: rec.entity_id.clone(),
                                period: rec.period,
                                column: Some(col.name.clone()),
                                message: format!(
                                    "category `{tok}` not allowed for `{}`",
                                    col.name
                                ),
                            });
                        }
                    }
                }
                (ColumnKind::Categorical, Value::Number(_)) => violations.push(Violation {
                    kind: ViolationKind::WrongType,
                    entity_id: rec.entity_id.clone(),
                    period: rec.period,
                    column: Some(col.name.clone()),
                    message: format!("numeric value in categorical column `{}`", col.name),
                }),
                (ColumnKind::Continuous | ColumnKind::Count, Value::Category(tok)) => {
                    violations.push(Violation {
                        kind: ViolationKind::WrongType,
                        entity_id: rec.entity_id.clone(),
                        period: rec.period,
                        column: Some(col.name.clone()),
                        message: format!(
                            "non-numeric value `{tok}` in numeric column `{}`",
                            col.name
                        ),
                    })
                }
                _ => {}
            }
        }
    }
    violations
}

/// One supervised example: the window's lagged feature values (index 0 is
/// the oldest lag, t-window) plus the target label at period t. Variation
/// and macro features start empty and are filled by the preprocessing
/// stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedRow {
    pub entity_id: String,
    pub target_period: PeriodIndex,
    pub lags: Vec<Vec<Value>>,
    pub variations: Vec<f64>,
    pub macro_features: Vec<f64>,
    pub target: u8,
}

impl SupervisedRow {
    /// Periods of the lagged observations, oldest first.
    pub fn lag_periods(&self) -> Vec<PeriodIndex> {
        let w = self.lags.len() as u32;
        (1..=w)
            .map(|i| PeriodIndex(self.target_period.0 - (w - i + 1)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LagWindowReport {
    pub n_rows: usize,
    pub dropped_missing_target: usize,
    pub dropped_excess_missing: usize,
}

/// Builds Eq.-style lag windows: for every maximal run of consecutive
/// periods of one entity, each position with `window` periods of history
/// becomes one supervised row targeting the label at that position.
///
/// Rows whose target label is missing are dropped and counted, as are rows
/// where more than 20% of lagged numeric values are missing. Output order
/// is (entity_id lexicographic, target_period ascending).
pub fn build_lag_windows(
    data: &PanelDataset,
    window: usize,
) -> (Vec<SupervisedRow>, LagWindowReport) {
    assert!(window >= 1, "window must be >= 1");
    let numeric_slots: Vec<usize> = data
        .schema
        .input_columns()
        .enumerate()
        .filter(|(_, c)| c.is_numeric())
        .map(|(i, _)| i)
        .collect();

    let mut by_entity: BTreeMap<&str, Vec<&EntityPeriodRecord>> = BTreeMap::new();
    for rec in &data.records {
        by_entity.entry(&rec.entity_id).or_default().push(rec);
    }

    let mut rows = Vec::new();
    let mut report = LagWindowReport::default();
    for (entity, mut recs) in by_entity {
        recs.sort_by_key(|r| r.period);
        // Maximal runs of consecutive periods.
        let mut run_start = 0;
        for i in 0..=recs.len() {
            let run_ends = i == recs.len()
                || (i > run_start && recs[i].period.0 != recs[i - 1].period.0 + 1);
            if !run_ends {
                continue;
            }
            let run = &recs[run_start..i];
            for t in window..run.len() {
                let target_rec = run[t];
                let Some(target) = target_rec.risk_label else {
                    report.dropped_missing_target += 1;
                    continue;
                };
                let lag_recs = &run[t - window..t];
                let missing = lag_recs
                    .iter()
                    .flat_map(|r| numeric_slots.iter().map(|&s| &r.values[s]))
                    .filter(|v| v.is_missing())
                    .count();
                let total = numeric_slots.len() * window;
                if total > 0 && (missing as f64) > 0.20 * total as f64 {
                    report.dropped_excess_missing += 1;
                    continue;
                }
                rows.push(SupervisedRow {
                    entity_id: entity.to_string(),
                    target_period: target_rec.period,
                    lags: lag_recs.iter().map(|r| r.values.clone()).collect(),
                    variations: Vec::new(),
                    macro_features: Vec::new(),
                    target,
                });
            }
            run_start = i;
        }
    }
    report.n_rows = rows.len();
    (rows, report)
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Number(x) => {
            if x.fract() == 0.0 && x.abs() < 1e15 {
                format!("{}", *x as i64)
            } else {
                format!("{x}")
            }
        }
        Value::Category(tok) => tok.clone(),
        Value::Missing => String::new(),
    }
}

/// Writes the panel CSV: identifier, period, input columns in schema order,
/// then the target column. Empty cell = missing.
pub fn write_panel_csv(data: &PanelDataset, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec![
        data.schema.identifier_column().name.clone(),
        data.schema.period_column().name.clone(),
    ];
    header.extend(data.schema.input_columns().map(|c| c.name.clone()));
    header.push(data.schema.target_column().name.clone());
    wtr.write_record(&header)?;
    for rec in &data.records {
        let mut row = vec![rec.entity_id.clone(), rec.period.to_string()];
        row.extend(rec.values.iter().map(format_value));
        row.push(rec.risk_label.map(|l| l.to_string()).unwrap_or_default());
        wtr.write_record(&row)?;
    }
    wtr.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a panel CSV against a schema. Header columns must be known to the
/// schema; schema input columns absent from the header read as missing.
pub fn read_panel_csv(path: &Path, schema: &ColumnSchema) -> Result<PanelDataset> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    let headers = rdr.headers()?.clone();
    let id_name = &schema.identifier_column().name;
    let period_name = &schema.period_column().name;
    let target_name = &schema.target_column().name;

    let mut id_pos = None;
    let mut period_pos = None;
    let mut target_pos = None;
    // header position -> input slot
    let mut input_slot_of_header: Vec<Option<usize>> = vec![None; headers.len()];
    for (h, name) in headers.iter().enumerate() {
        if name == id_name {
            id_pos = Some(h);
        } else if name == period_name {
            period_pos = Some(h);
        } else if name == target_name {
            target_pos = Some(h);
        } else if let Some(slot) = schema.input_index(name) {
            input_slot_of_header[h] = Some(slot);
        } else {
            return Err(Error::Schema(format!(
                "unknown column `{name}` in {}",
                path.display()
            )));
        }
    }
    let id_pos = id_pos
        .ok_or_else(|| Error::Schema(format!("missing identifier column `{id_name}`")))?;
    let period_pos = period_pos
        .ok_or_else(|| Error::Schema(format!("missing period column `{period_name}`")))?;

    let kinds: Vec<ColumnKind> = schema.input_columns().map(|c| c.kind).collect();
    let mut records = Vec::new();
    for result in rdr.records() {
        let record = result?;
        let mut values = vec![Value::Missing; kinds.len()];
        for (h, cell) in record.iter().enumerate() {
            let Some(Some(slot)) = input_slot_of_header.get(h) else {
                continue;
            };
            if cell.is_empty() {
                continue;
            }
            values[*slot] = match kinds[*slot] {
                ColumnKind::Categorical => Value::Category(cell.to_string()),
                _ => match cell.parse::<f64>() {
                    Ok(x) => Value::Number(x),
                    Err(_) => Value::Category(cell.to_string()),
                },
            };
        }
        let risk_label = match target_pos.map(|p| record.get(p).unwrap_or("")) {
            Some("") | None => None,
            Some(cell) => Some(cell.parse::<u8>().map_err(|_| {
                Error::Data(format!("invalid risk label `{cell}` in {}", path.display()))
            })?),
        };
        records.push(EntityPeriodRecord {
            entity_id: record.get(id_pos).unwrap_or("").to_string(),
            period: parse_period(record.get(period_pos).unwrap_or(""))?,
            values,
            risk_label,
        });
    }
    Ok(PanelDataset {
        schema: schema.clone(),
        records,
    })
}
