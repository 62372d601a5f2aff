//! Automatic root-faking for package-manager RUN instructions (`--force`).
//!
//! The engine detects a known distribution by inspecting files in the image
//! (no command runs in the container for this), then, only when the user
//! asked for it, initializes the wrapper once before the first RUN that
//! needs it and prepends the wrapper to every such RUN. Without `--force` the
//! same detection and keyword tests still run so a failed build can say that
//! modifications were available.

use std::path::Path;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::fsutil::resolve_in_root;
use crate::sandbox::{Runner, SandboxError, SandboxSpec, Stream};
use crate::transcript::{format_argv, Transcript};

const BUILTIN_CONFIGS: &str = include_str!("configs.toml");

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("config: {0}")]
    Config(String),
    #[error("init step {step} failed: exit {code}")]
    InitStepFailed { step: usize, code: i32 },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone)]
pub struct FileMatcher {
    /// Absolute path inside the image.
    pub file: String,
    pub regex: Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct InitStep {
    pub check: String,
    #[serde(rename = "do")]
    pub run: String,
    /// Installs the wrapper program itself.
    #[serde(default)]
    pub wrapper: bool,
}

#[derive(Debug, Clone)]
pub struct DistroConfig {
    pub name: String,
    pub description: String,
    pub matchers: Vec<FileMatcher>,
    pub init_steps: Vec<InitStep>,
    pub run_triggers: Vec<String>,
    pub wrapper: Vec<String>,
}

impl PartialEq for DistroConfig {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    config: Vec<RawConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    description: String,
    #[serde(rename = "match", default)]
    matchers: Vec<RawMatcher>,
    #[serde(default)]
    init: Vec<InitStep>,
    #[serde(default)]
    triggers: Vec<String>,
    #[serde(default = "default_wrapper")]
    wrapper: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatcher {
    file: String,
    regex: String,
}

fn default_wrapper() -> Vec<String> {
    vec!["fakeroot".into()]
}

/// Ordered set of configurations; the first match wins.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    configs: Vec<DistroConfig>,
}

impl Registry {
    pub fn builtin() -> Self {
        Registry::from_toml(BUILTIN_CONFIGS).expect("built-in configs are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, InjectError> {
        let mut reg = Registry::default();
        reg.extend_from_toml(text)?;
        Ok(reg)
    }

    /// Append configurations from another file; names must stay unique.
    pub fn extend_from_toml(&mut self, text: &str) -> Result<(), InjectError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| InjectError::Config(e.to_string()))?;
        for raw in file.config {
            if self.get(&raw.name).is_some() {
                return Err(InjectError::Config(format!("duplicate config name {:?}", raw.name)));
            }
            for (i, s) in raw.init.iter().enumerate() {
                if s.check.trim().is_empty() || s.run.trim().is_empty() {
                    return Err(InjectError::Config(format!(
                        "{}: init step {} needs non-empty check and do",
                        raw.name,
                        i + 1
                    )));
                }
            }
            let matchers = raw
                .matchers
                .into_iter()
                .map(|m| {
                    Regex::new(&m.regex)
                        .map(|regex| FileMatcher {
                            file: m.file.clone(),
                            regex,
                        })
                        .map_err(|e| InjectError::Config(format!("{}: {e}", raw.name)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            self.configs.push(DistroConfig {
                name: raw.name,
                description: raw.description,
                matchers,
                init_steps: raw.init,
                run_triggers: raw.triggers,
                wrapper: raw.wrapper,
            });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DistroConfig> {
        self.configs.iter().find(|c| c.name == name)
    }

    pub fn configs(&self) -> &[DistroConfig] {
        &self.configs
    }
}

/// First configuration (registry order) whose matchers all succeed against
/// files in the image.
pub fn detect_config<'r>(image_root: &Path, registry: &'r Registry) -> Option<&'r DistroConfig> {
    registry.configs.iter().find(|c| {
        !c.matchers.is_empty()
            && c.matchers.iter().all(|m| {
                resolve_in_root(image_root, Path::new(&m.file))
                    .and_then(std::fs::read)
                    .map(|bytes| m.regex.is_match(&String::from_utf8_lossy(&bytes)))
                    .unwrap_or(false)
            })
    })
}

pub fn needs_modification(run_payload: &str, config: &DistroConfig) -> bool {
    config
        .run_triggers
        .iter()
        .any(|t| !t.is_empty() && run_payload.contains(t.as_str()))
}

/// Prepend the configured wrapper.
pub fn rewrite(argv: &[String], config: &DistroConfig) -> Vec<String> {
    config.wrapper.iter().chain(argv).cloned().collect()
}

#[derive(Debug, Clone, Default)]
pub struct ForceState {
    pub enabled: bool,
    pub config: Option<DistroConfig>,
    pub initialized: bool,
    pub modified_count: usize,
}

impl ForceState {
    pub fn new(enabled: bool, config: Option<DistroConfig>) -> Self {
        ForceState {
            enabled,
            config,
            ..Default::default()
        }
    }
}

/// Run the init steps of `config` once. `template` supplies everything but
/// the argument vector. With `skip_wrapper_steps`, steps that only install
/// the wrapper are left out (the builder provides its own).
pub fn apply_init(
    runner: &mut dyn Runner,
    template: &SandboxSpec,
    config: &DistroConfig,
    mut state: ForceState,
    skip_wrapper_steps: bool,
    transcript: &mut Transcript<'_>,
) -> Result<ForceState, InjectError> {
    debug_assert!(state.enabled && !state.initialized);
    for (idx, step) in config.init_steps.iter().enumerate() {
        let n = idx + 1;
        if skip_wrapper_steps && step.wrapper {
            continue;
        }
        transcript.line(&format!("workarounds: init step {n}: checking: $ {}", step.check));
        let check = run_shell(runner, template, &step.check, transcript)?;
        if check == 0 {
            continue;
        }
        transcript.line(&format!("workarounds: init step {n}: $ {}", step.run));
        let code = run_shell(runner, template, &step.run, transcript)?;
        if code != 0 {
            return Err(InjectError::InitStepFailed { step: n, code });
        }
    }
    state.initialized = true;
    Ok(state)
}

fn run_shell(
    runner: &mut dyn Runner,
    template: &SandboxSpec,
    cmd: &str,
    transcript: &mut Transcript<'_>,
) -> Result<i32, InjectError> {
    let mut spec = template.clone();
    spec.argv = vec!["/bin/sh".into(), "-c".into(), cmd.into()];
    let result = runner.run(&spec, &mut |_: Stream, b: &[u8]| transcript.raw(b))?;
    Ok(result.status.code())
}

/// Transcript line for a rewritten RUN.
pub fn rewrite_line(argv: &[String]) -> String {
    format!("workarounds: RUN: new command: {}", format_argv(argv))
}

pub fn will_use_line(config: &DistroConfig) -> String {
    format!("will use --force: {}: {}", config.name, config.description)
}

/// End-of-build message: the summary when `--force` was on, a suggestion
/// when it was off, a configuration applies and the build failed.
pub fn advise(state: &ForceState, build_failed: bool) -> Option<String> {
    if state.enabled {
        return Some(format!(
            "--force: init OK & modified {} RUN instructions",
            state.modified_count
        ));
    }
    match &state.config {
        Some(c) if build_failed => Some(format!(
            "hint: --force may fix it: {}: {}",
            c.name, c.description
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{ExitStatus, RunResult};

    fn reg() -> Registry {
        Registry::builtin()
    }

    fn root_with(file: &str, contents: &str) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(file.trim_start_matches('/'));
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, contents).unwrap();
        d
    }

    #[test]
    fn builtins() {
        let r = reg();
        let names: Vec<_> = r.configs().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["rhel7", "debderiv"]);
        let rhel = r.get("rhel7").unwrap();
        assert_eq!(rhel.init_steps.len(), 1);
        assert_eq!(rhel.init_steps[0].check, "command -v fakeroot > /dev/null");
        assert_eq!(
            rhel.init_steps[0].run,
            "set -ex; if ! grep -Eq '\\[epel\\]' /etc/yum.conf /etc/yum.repos.d/*; then yum install -y epel-release; yum-config-manager --disable epel; fi; yum --enablerepo=epel install -y fakeroot;"
        );
        let deb = r.get("debderiv").unwrap();
        assert_eq!(deb.init_steps.len(), 2);
        assert_eq!(
            deb.init_steps[0].check,
            "apt-config dump | fgrep -q 'APT::Sandbox::User \"root\"' || ! fgrep -q _apt /etc/passwd"
        );
        assert_eq!(
            deb.init_steps[0].run,
            "echo 'APT::Sandbox::User \"root\";' > /etc/apt/apt.conf.d/no-sandbox"
        );
        assert_eq!(deb.init_steps[1].run, "apt-get update && apt-get install -y pseudo");
    }

    #[test]
    fn detect() {
        let r = reg();
        let d = root_with("/etc/redhat-release", "CentOS Linux release 7.9.2009 (Core)\n");
        assert_eq!(detect_config(d.path(), &r).unwrap().name, "rhel7");
        let d = root_with("/etc/redhat-release", "release 7.9");
        assert_eq!(detect_config(d.path(), &r).unwrap().name, "rhel7");
        let d = root_with("/etc/redhat-release", "CentOS Linux release 8.4");
        assert!(detect_config(d.path(), &r).is_none());
        let d = root_with("/etc/os-release", "VERSION_CODENAME=buster\n");
        assert_eq!(detect_config(d.path(), &r).unwrap().name, "debderiv");
        let d = root_with("/etc/os-release", "VERSION_CODENAME=bullseye\n");
        assert!(detect_config(d.path(), &r).is_none());
        let d = tempfile::tempdir().unwrap();
        assert!(detect_config(d.path(), &r).is_none());
    }

    #[test]
    fn detect_follows_symlink_inside_image() {
        let d = root_with("/usr/lib/os-release", "UBUNTU_CODENAME=focal\n");
        std::fs::create_dir_all(d.path().join("etc")).unwrap();
        std::os::unix::fs::symlink("../usr/lib/os-release", d.path().join("etc/os-release"))
            .unwrap();
        assert_eq!(detect_config(d.path(), &reg()).unwrap().name, "debderiv");
    }

    #[test]
    fn detect_is_registry_ordered() {
        let mut r = Registry::from_toml(
            r#"
[[config]]
name = "any-rh"
description = "any"
[[config.match]]
file = "/etc/redhat-release"
regex = "release"
"#,
        )
        .unwrap();
        r.extend_from_toml(BUILTIN_CONFIGS).unwrap();
        let d = root_with("/etc/redhat-release", "release 7.9");
        assert_eq!(detect_config(d.path(), &r).unwrap().name, "any-rh");
    }

    #[test]
    fn triggers() {
        let r = reg();
        let (rhel, deb) = (r.get("rhel7").unwrap(), r.get("debderiv").unwrap());
        assert!(needs_modification("yum install -y openssh", rhel));
        assert!(!needs_modification("echo hello", rhel));
        assert!(needs_modification("apt-get update", deb));
        assert!(needs_modification("dpkg -i x.deb", deb));
        // plain substring, not word match
        assert!(needs_modification("echo capture", deb));
    }

    #[test]
    fn rewrites() {
        let r = reg();
        let argv: Vec<String> = ["/bin/sh", "-c", "yum install -y openssh"]
            .map(String::from)
            .to_vec();
        let new = rewrite(&argv, r.get("rhel7").unwrap());
        assert_eq!(new, ["fakeroot", "/bin/sh", "-c", "yum install -y openssh"]);
        assert_eq!(
            rewrite_line(&new),
            "workarounds: RUN: new command: ['fakeroot', '/bin/sh', '-c', 'yum install -y openssh']"
        );
        let argv: Vec<String> = ["/bin/sh", "-c", "apt-get install -y openssh-client"]
            .map(String::from)
            .to_vec();
        assert_eq!(
            rewrite(&argv, r.get("debderiv").unwrap()),
            ["fakeroot", "/bin/sh", "-c", "apt-get install -y openssh-client"]
        );
        let mut bare = r.get("rhel7").unwrap().clone();
        bare.wrapper.clear();
        assert_eq!(rewrite(&argv, &bare), argv);
    }

    #[test]
    fn advice() {
        let rhel = reg().get("rhel7").cloned();
        let off = ForceState::new(false, rhel.clone());
        assert!(advise(&off, true).unwrap().contains("--force"));
        assert!(advise(&off, true).unwrap().contains("rhel7"));
        assert_eq!(advise(&off, false), None);
        assert_eq!(advise(&ForceState::new(false, None), true), None);
        let mut on = ForceState::new(true, rhel);
        on.initialized = true;
        on.modified_count = 2;
        assert_eq!(
            advise(&on, false).unwrap(),
            "--force: init OK & modified 2 RUN instructions"
        );
    }

    #[test]
    fn config_validation() {
        let dup = format!("{BUILTIN_CONFIGS}\n{BUILTIN_CONFIGS}");
        assert!(matches!(Registry::from_toml(&dup), Err(InjectError::Config(_))));
        let empty_step = r#"
[[config]]
name = "x"
description = "x"
[[config.init]]
check = ""
do = "true"
"#;
        assert!(Registry::from_toml(empty_step).is_err());
        assert!(Registry::from_toml("[[config]]\nname='x'\ndescription='y'\nbogus=1").is_err());
    }

    /// Scripted runner: exit codes per command, records what ran.
    struct Scripted {
        codes: Vec<(String, i32)>,
        ran: Vec<String>,
    }

    impl Runner for Scripted {
        fn run(
            &mut self,
            spec: &SandboxSpec,
            sink: &mut dyn FnMut(Stream, &[u8]),
        ) -> Result<RunResult, SandboxError> {
            let cmd = spec.argv[2].clone();
            sink(Stream::Stdout, format!("ran {cmd}\n").as_bytes());
            let code = self
                .codes
                .iter()
                .find(|(c, _)| *c == cmd)
                .map_or(0, |(_, code)| *code);
            self.ran.push(cmd);
            Ok(RunResult {
                status: ExitStatus::Code(code),
                stdout: vec![],
                stderr: vec![],
            })
        }
    }

    fn init(
        runner: &mut Scripted,
        config: &DistroConfig,
        skip: bool,
    ) -> (Result<ForceState, InjectError>, String) {
        let template = SandboxSpec::new("/nonexistent", vec![]);
        let mut out = Vec::new();
        let res = {
            let mut t = Transcript::new(&mut out);
            apply_init(
                runner,
                &template,
                config,
                ForceState::new(true, Some(config.clone())),
                skip,
                &mut t,
            )
        };
        (res, String::from_utf8(out).unwrap())
    }

    #[test]
    fn init_runs_do_when_check_fails() {
        let r = reg();
        let rhel = r.get("rhel7").unwrap();
        let mut runner = Scripted {
            codes: vec![(rhel.init_steps[0].check.clone(), 1)],
            ran: vec![],
        };
        let (st, out) = init(&mut runner, rhel, false);
        assert!(st.unwrap().initialized);
        assert_eq!(runner.ran.len(), 2);
        let lines: Vec<_> = out.lines().filter(|l| l.starts_with("workarounds")).collect();
        assert_eq!(
            lines,
            [
                "workarounds: init step 1: checking: $ command -v fakeroot > /dev/null",
                &*format!("workarounds: init step 1: $ {}", rhel.init_steps[0].run),
            ]
        );
    }

    #[test]
    fn init_skips_satisfied_steps() {
        let r = reg();
        let deb = r.get("debderiv").unwrap();
        let mut runner = Scripted {
            codes: vec![],
            ran: vec![],
        };
        let (st, _) = init(&mut runner, deb, false);
        assert!(st.unwrap().initialized);
        assert_eq!(runner.ran, [deb.init_steps[0].check.clone(), deb.init_steps[1].check.clone()]);
    }

    #[test]
    fn init_failure_names_step() {
        let r = reg();
        let deb = r.get("debderiv").unwrap();
        let mut runner = Scripted {
            codes: vec![
                (deb.init_steps[1].check.clone(), 1),
                (deb.init_steps[1].run.clone(), 100),
            ],
            ran: vec![],
        };
        let (st, _) = init(&mut runner, deb, false);
        assert!(matches!(
            st,
            Err(InjectError::InitStepFailed { step: 2, code: 100 })
        ));
    }

    #[test]
    fn wrapper_steps_skipped_with_builder_shim() {
        let r = reg();
        let deb = r.get("debderiv").unwrap();
        let mut runner = Scripted {
            codes: vec![(deb.init_steps[1].check.clone(), 1)],
            ran: vec![],
        };
        let (st, _) = init(&mut runner, deb, true);
        assert!(st.unwrap().initialized);
        assert_eq!(runner.ran, [deb.init_steps[0].check.clone()]);
    }
}
