//! Adapter for file-driven crop models run as external processes.
//!
//! Each call renders a template input file by replacing `{{name}}`
//! placeholders, writes the scenario's weather as CSV next to it, runs the
//! configured command in a fresh temporary directory and extracts the yield
//! with an [`OutputRule`].
//!
//! Placeholders: every decision-variable name, plus `weather_file`,
//! `input_file`, `work_dir`, `scenario_id` and `source_year`. They are
//! substituted in the template and in every command argument. The command
//! runs with the temporary directory as its working directory, so the
//! program should be on `PATH` or given by absolute path.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_yield, Evaluator};
use crate::domain::{DecisionSpace, DecisionVector, Scenario};
use crate::error::{Error, EvalError, Result};

pub const DEFAULT_TIMEOUT_SECONDS: f64 = 120.0;

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const DRAIN_GRACE: Duration = Duration::from_secs(2);
const BUILTIN_PLACEHOLDERS: [&str; 5] = ["weather_file", "input_file", "work_dir", "scenario_id", "source_year"];

/// Where the yield is read from once the process exits successfully.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OutputRule {
    /// `csv:<file>:<column>`: the named column of the last data row of a CSV
    /// file written into the working directory.
    Csv { file: String, column: String },
    /// `regex:<pattern>`: the single capture group of the last match in stdout.
    Regex(String),
}

impl FromStr for OutputRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("csv:") {
            let (file, column) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::domain(format!("output rule `{s}` must be csv:<file>:<column>")))?;
            if file.is_empty() || column.is_empty() {
                return Err(Error::domain(format!("output rule `{s}` has an empty file or column")));
            }
            Ok(OutputRule::Csv { file: file.into(), column: column.into() })
        } else if let Some(pattern) = s.strip_prefix("regex:") {
            let re = Regex::new(pattern).map_err(|e| Error::domain(format!("output regex: {e}")))?;
            if re.captures_len() != 2 {
                return Err(Error::domain(format!(
                    "output regex `{pattern}` must have exactly one capture group, has {}",
                    re.captures_len() - 1
                )));
            }
            Ok(OutputRule::Regex(pattern.into()))
        } else {
            Err(Error::domain(format!("output rule `{s}` must start with csv: or regex:")))
        }
    }
}

impl fmt::Display for OutputRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputRule::Csv { file, column } => write!(f, "csv:{file}:{column}"),
            OutputRule::Regex(p) => write!(f, "regex:{p}"),
        }
    }
}

impl TryFrom<String> for OutputRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OutputRule> for String {
    fn from(r: OutputRule) -> String {
        r.to_string()
    }
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECONDS
}

fn default_max_concurrent() -> usize {
    1
}

fn default_weather_file() -> String {
    "weather.csv".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalAdapterConfig {
    /// Template for the model's input file.
    pub template: PathBuf,
    /// Name of the rendered template inside the working directory.
    /// Defaults to the template's file name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_file: Option<String>,
    /// Program and arguments.
    pub command: Vec<String>,
    pub output: OutputRule,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    /// Upper bound on simultaneously running processes.
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Name of the weather CSV written into the working directory.
    #[serde(default = "default_weather_file")]
    pub weather_file: String,
    /// Persistent result cache, one file per key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl ExternalAdapterConfig {
    pub fn new(template: impl Into<PathBuf>, command: Vec<String>, output: OutputRule) -> Self {
        ExternalAdapterConfig {
            template: template.into(),
            input_file: None,
            command,
            output,
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            max_concurrent: 1,
            weather_file: default_weather_file(),
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() || self.command[0].is_empty() {
            return Err(Error::domain("external command must not be empty"));
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return Err(Error::domain(format!("timeout must be positive, got {}", self.timeout_seconds)));
        }
        if self.max_concurrent == 0 {
            return Err(Error::domain("max_concurrent must be at least 1"));
        }
        for name in [Some(self.weather_file.as_str()), self.input_file.as_deref()].into_iter().flatten() {
            if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::domain(format!("`{name}` must be a plain file name")));
            }
        }
        Ok(())
    }

    /// Relative template and cache paths are resolved against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.template.is_relative() {
            self.template = base.join(&self.template);
        }
        if let Some(dir) = &self.cache_dir {
            if dir.is_relative() {
                self.cache_dir = Some(base.join(dir));
            }
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct ExternalEvaluator {
    config: ExternalAdapterConfig,
    template: String,
    template_hash: String,
    input_file: String,
    regex: Option<Regex>,
    cache: Mutex<HashMap<String, f64>>,
    invocations: AtomicUsize,
    cache_hits: AtomicUsize,
    slots: Semaphore,
}

impl fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("config", &self.config)
            .field("template_hash", &self.template_hash)
            .field("invocations", &self.invocations())
            .finish()
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z0-9_.\-]+)\s*\}\}").expect("valid regex"))
}

/// Replaces `{{name}}` placeholders. Unknown names are an error.
pub fn render(text: &str, values: &HashMap<String, String>) -> Result<String, EvalError> {
    let mut unknown = Vec::new();
    let out = placeholder_regex().replace_all(text, |c: &regex::Captures<'_>| match values.get(&c[1]) {
        Some(v) => v.clone(),
        None => {
            unknown.push(c[1].to_string());
            String::new()
        }
    });
    if unknown.is_empty() {
        Ok(out.into_owned())
    } else {
        Err(EvalError::Setup(format!("unknown placeholder(s): {}", unknown.join(", "))))
    }
}

impl ExternalEvaluator {
    pub fn new(config: ExternalAdapterConfig) -> Result<Self> {
        config.validate()?;
        let template = std::fs::read_to_string(&config.template).map_err(|e| Error::io(&config.template, e))?;
        let template_hash = hex::encode(Sha256::digest(template.as_bytes()));
        let input_file = match &config.input_file {
            Some(name) => name.clone(),
            None => config
                .template
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::domain("template path has no file name"))?,
        };
        if input_file == config.weather_file {
            return Err(Error::domain("input file and weather file must differ"));
        }
        let regex = match &config.output {
            OutputRule::Regex(p) => Some(Regex::new(p).map_err(|e| Error::domain(format!("output regex: {e}")))?),
            OutputRule::Csv { .. } => None,
        };
        if let Some(dir) = &config.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let slots = Semaphore { free: Mutex::new(config.max_concurrent), cv: Condvar::new() };
        Ok(ExternalEvaluator {
            config,
            template,
            template_hash,
            input_file,
            regex,
            cache: Mutex::new(HashMap::new()),
            invocations: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            slots,
        })
    }

    pub fn config(&self) -> &ExternalAdapterConfig {
        &self.config
    }

    /// Number of processes launched so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    /// Calls answered from the in-memory or on-disk cache.
    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Checks that the template and command only use known placeholders.
    pub fn check_placeholders(&self, space: &DecisionSpace) -> Result<()> {
        let known: Vec<&str> = space
            .variables()
            .iter()
            .map(|v| v.name.as_str())
            .chain(BUILTIN_PLACEHOLDERS)
            .collect();
        let texts = std::iter::once(self.template.as_str()).chain(self.config.command.iter().map(String::as_str));
        for text in texts {
            for c in placeholder_regex().captures_iter(text) {
                if !known.contains(&&c[1]) {
                    return Err(Error::domain(format!("unknown placeholder `{{{{{}}}}}`", &c[1])));
                }
            }
        }
        Ok(())
    }

    fn cache_key(&self, names: &[(String, f64)], scenario: &Scenario, weather_digest: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(self.template_hash.as_bytes());
        for arg in &self.config.command {
            h.update((arg.len() as u64).to_le_bytes());
            h.update(arg.as_bytes());
        }
        h.update(self.config.output.to_string().as_bytes());
        h.update(self.input_file.as_bytes());
        h.update(b"\0");
        h.update(self.config.weather_file.as_bytes());
        h.update(b"\0");
        for (name, value) in names {
            h.update(name.as_bytes());
            h.update(b"=");
            h.update(value.to_bits().to_le_bytes());
        }
        h.update(scenario.id.as_bytes());
        h.update(b"\0");
        h.update(scenario.source_year.to_le_bytes());
        h.update(weather_digest);
        hex::encode(h.finalize())
    }

    fn cached(&self, key: &str) -> Option<f64> {
        if let Some(v) = self.cache.lock().expect("cache poisoned").get(key) {
            return Some(*v);
        }
        let dir = self.config.cache_dir.as_ref()?;
        let text = std::fs::read_to_string(dir.join(key)).ok()?;
        let v: f64 = text.trim().parse().ok()?;
        check_yield(v).ok()?;
        self.cache.lock().expect("cache poisoned").insert(key.to_string(), v);
        Some(v)
    }

    fn store(&self, key: &str, value: f64) {
        self.cache.lock().expect("cache poisoned").insert(key.to_string(), value);
        if let Some(dir) = &self.config.cache_dir {
            let write = || -> std::io::Result<()> {
                use std::io::Write;
                let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                write!(tmp, "{value}")?;
                tmp.persist(dir.join(key)).map_err(|e| e.error)?;
                Ok(())
            };
            if let Err(e) = write() {
                log::warn!("could not write cache entry {key}: {e}");
            }
        }
    }

    fn run_once(&self, weather_csv: &[u8], values: &HashMap<String, String>) -> Result<f64, EvalError> {
        let setup = |e: std::io::Error| EvalError::Setup(e.to_string());
        let dir = tempfile::Builder::new().prefix("cropopt-run-").tempdir().map_err(setup)?;
        let mut values = values.clone();
        values.insert("work_dir".into(), dir.path().display().to_string());

        std::fs::write(dir.path().join(&self.config.weather_file), weather_csv).map_err(setup)?;
        let input = render(&self.template, &values)?;
        std::fs::write(dir.path().join(&self.input_file), input).map_err(setup)?;
        let args = self
            .config
            .command
            .iter()
            .map(|a| render(a, &values))
            .collect::<Result<Vec<_>, _>>()?;

        let _permit = self.slots.acquire();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..])
            .current_dir(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        self.invocations.fetch_add(1, Ordering::SeqCst);
        let mut child = cmd
            .spawn()
            .map_err(|e| EvalError::Setup(format!("could not start `{}`: {e}", args[0])))?;

        let (stdout, stderr, done) = capture(&mut child);
        let deadline = Instant::now() + Duration::from_secs_f64(self.config.timeout_seconds);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => break None,
                Ok(None) => std::thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(EvalError::Setup(format!("waiting for process: {e}"))),
            }
        };
        let Some(status) = status else {
            kill_tree(&mut child);
            let output = collected(&stdout, &stderr);
            return Err(EvalError::Timeout { seconds: self.config.timeout_seconds, output });
        };
        let drain_deadline = Instant::now() + DRAIN_GRACE;
        for _ in 0..2 {
            let left = drain_deadline.saturating_duration_since(Instant::now());
            if done.recv_timeout(left).is_err() {
                break;
            }
        }
        let output = collected(&stdout, &stderr);
        if !status.success() {
            return Err(EvalError::ProcessFailed { status: status.to_string(), output });
        }

        let value = match &self.config.output {
            OutputRule::Regex(_) => {
                let re = self.regex.as_ref().expect("compiled with the rule");
                let text = String::from_utf8_lossy(&stdout.lock().expect("poisoned")).into_owned();
                let cap = re
                    .captures_iter(&text)
                    .last()
                    .map(|c| c[1].to_string())
                    .ok_or_else(|| EvalError::Unparseable { reason: "output pattern did not match".into(), output: output.clone() })?;
                parse_number(&cap, &output)?
            }
            OutputRule::Csv { file, column } => read_csv_value(&dir.path().join(file), column, &output)?,
        };
        check_yield(value)
    }
}

fn parse_number(text: &str, output: &str) -> Result<f64, EvalError> {
    text.trim().parse::<f64>().map_err(|_| EvalError::Unparseable {
        reason: format!("`{}` is not a number", text.trim()),
        output: output.to_string(),
    })
}

fn read_csv_value(path: &Path, column: &str, output: &str) -> Result<f64, EvalError> {
    let fail = |reason: String| EvalError::Unparseable { reason, output: output.to_string() };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| fail(format!("column `{column}` not in {}", path.display())))?;
    let mut last = None;
    for rec in rdr.records() {
        last = Some(rec.map_err(|e| fail(e.to_string()))?);
    }
    let rec = last.ok_or_else(|| fail(format!("{} has no data rows", path.display())))?;
    let cell = rec.get(idx).ok_or_else(|| fail(format!("last row lacks column `{column}`")))?;
    parse_number(cell, output)
}

type Buffer = Arc<Mutex<Vec<u8>>>;

/// Reads both pipes on helper threads. Each thread signals `done` at EOF.
fn capture(child: &mut Child) -> (Buffer, Buffer, mpsc::Receiver<()>) {
    let (tx, rx) = mpsc::channel();
    let spawn_reader = |pipe: Option<Box<dyn Read + Send>>| {
        let buf: Buffer = Arc::default();
        let sink = Arc::clone(&buf);
        let tx = tx.clone();
        std::thread::spawn(move || {
            if let Some(mut pipe) = pipe {
                let mut chunk = [0u8; 4096];
                while let Ok(n) = pipe.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    sink.lock().expect("poisoned").extend_from_slice(&chunk[..n]);
                }
            }
            let _ = tx.send(());
        });
        buf
    };
    let out = spawn_reader(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err = spawn_reader(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    (out, err, rx)
}

fn collected(stdout: &Buffer, stderr: &Buffer) -> String {
    let out = String::from_utf8_lossy(&stdout.lock().expect("poisoned")).into_owned();
    let err = String::from_utf8_lossy(&stderr.lock().expect("poisoned")).into_owned();
    format!("--- stdout ---\n{out}--- stderr ---\n{err}")
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    if let Ok(pgid) = libc::pid_t::try_from(child.id()) {
        // The child was spawned as leader of its own process group, so this
        // reaches any grandchildren it started and nothing else.
        // SAFETY: killpg only sends a signal; it has no memory-safety preconditions.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, scenario: &Scenario) -> Result<f64, EvalError> {
        let named: Vec<(String, f64)> = space
            .variables()
            .iter()
            .zip(x.values(space))
            .map(|(v, value)| (v.name.clone(), value))
            .collect();

        let mut weather_csv = Vec::new();
        crate::weather::write_csv(&mut weather_csv, scenario.days())
            .map_err(|e| EvalError::Setup(format!("writing weather: {e}")))?;
        let key = self.cache_key(&named, scenario, &Sha256::digest(&weather_csv));
        if let Some(v) = self.cached(&key) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }

        let mut values: HashMap<String, String> = named.iter().map(|(n, v)| (n.clone(), format!("{v}"))).collect();
        values.insert("weather_file".into(), self.config.weather_file.clone());
        values.insert("input_file".into(), self.input_file.clone());
        values.insert("scenario_id".into(), scenario.id.clone());
        values.insert("source_year".into(), scenario.source_year.to_string());

        let value = self.run_once(&weather_csv, &values)?;
        self.store(&key, value);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_rules_parse_and_print() {
        let r: OutputRule = "csv:out/summary.csv:yield".parse().unwrap();
        assert_eq!(r, OutputRule::Csv { file: "out/summary.csv".into(), column: "yield".into() });
        assert_eq!(r.to_string(), "csv:out/summary.csv:yield");
        let r: OutputRule = r"regex:yield=(\d+(?:\.\d+)?)".parse().unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), r#""regex:yield=(\\d+(?:\\.\\d+)?)""#);
        assert!("regex:no group".parse::<OutputRule>().is_err());
        assert!("regex:(a)(b)".parse::<OutputRule>().is_err());
        assert!("csv:file-only".parse::<OutputRule>().is_err());
        assert!("json:x".parse::<OutputRule>().is_err());
    }

    #[test]
    fn render_substitutes_and_rejects_unknown() {
        let values: HashMap<String, String> = [("a".to_string(), "1".to_string()), ("b_c".into(), "x".into())].into();
        assert_eq!(render("{{a}}+{{ b_c }}={{a}}", &values).unwrap(), "1+x=1");
        let err = render("{{a}} {{zzz}}", &values).unwrap_err();
        assert!(err.to_string().contains("zzz"));
        assert_eq!(render("{ {a} }", &values).unwrap(), "{ {a} }");
    }
}
