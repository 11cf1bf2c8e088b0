use std::fmt::Write;
use std::path::Path;

use super::{BackendConfig, JobSpec};

/// Quotes a string for POSIX shells.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_./:=@%+,".contains(&b)) {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// `HH:MM:00` for a limit in minutes.
pub fn time_limit(minutes: u32) -> String {
    format!("{:02}:{:02}:00", minutes / 60, minutes % 60)
}

/// Script run by the local backend. The runner records state changes
/// itself, so this is only the backend prelude and the user command.
pub fn local_script(jobid: &str, spec: &JobSpec, backend: &BackendConfig) -> String {
    let mut s = String::from("#!/bin/sh\n");
    let _ = writeln!(s, "# job {jobid}: {}", spec.name);
    for line in &backend.prelude {
        let _ = writeln!(s, "{line}");
    }
    s.push_str(&spec.script);
    s.push('\n');
    s
}

/// Batch script for a slurm backend. The user command runs between two
/// `reached` calls made through `reached_cmd`, which must accept
/// `reached <jobid> <state> <info>` and print the run index.
///
/// Output depends only on the arguments.
pub fn emit_slurm_script(jobid: &str, spec: &JobSpec, backend: &BackendConfig, job_dir: &Path, reached_cmd: &str) -> String {
    let r = &spec.resources;
    let job_dir = job_dir.display().to_string();
    let work = spec
        .directory
        .as_ref()
        .map(|d| d.display().to_string())
        .unwrap_or_else(|| format!("{job_dir}/work"));
    let mut s = String::from("#!/bin/bash\n");
    let _ = writeln!(s, "#SBATCH --job-name={}", shell_quote(&spec.name));
    let _ = writeln!(s, "#SBATCH --nodes={}", r.node_count);
    let _ = writeln!(s, "#SBATCH --ntasks-per-node={}", r.processes_per_node);
    let _ = writeln!(s, "#SBATCH --cpus-per-task={}", r.cpu_cores_per_process);
    let _ = writeln!(s, "#SBATCH --time={}", time_limit(r.duration));
    if let Some(q) = &backend.queue_name {
        let _ = writeln!(s, "#SBATCH --partition={}", shell_quote(q));
    }
    if let Some(p) = &backend.project_name {
        let _ = writeln!(s, "#SBATCH --account={}", shell_quote(p));
    }
    let _ = writeln!(s, "#SBATCH --output=/dev/null");
    s.push('\n');
    let _ = writeln!(s, "jobid={}", shell_quote(jobid));
    let _ = writeln!(s, "reached() {{ {reached_cmd} reached \"$jobid\" \"$@\"; }}");
    s.push_str("jobndx=$(reached active 0) || exit 1\n");
    let _ = writeln!(
        s,
        "exec >{q}/log/\"$jobndx\".out 2>{q}/log/\"$jobndx\".err",
        q = shell_quote(&job_dir)
    );
    let _ = writeln!(s, "cd {} || {{ reached failed -1 >/dev/null; exit 1; }}", shell_quote(&work));
    for line in &backend.prelude {
        let _ = writeln!(s, "{line}");
    }
    s.push_str("(\n");
    s.push_str(&spec.script);
    s.push_str("\n)\nrc=$?\n");
    s.push_str("if [ \"$rc\" -eq 0 ]; then reached completed 0; else reached failed \"$rc\"; fi >/dev/null\n");
    s.push_str("exit \"$rc\"\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jobs::spec::{Backends, EXAMPLE_BACKENDS, EXAMPLE_JOBSPEC};

    fn emit() -> String {
        let backends: Backends = serde_yaml::from_str(EXAMPLE_BACKENDS).unwrap();
        let spec: JobSpec = serde_yaml::from_str(EXAMPLE_JOBSPEC).unwrap();
        emit_slurm_script(
            "76312231.123",
            &spec,
            &backends["S3DFslurm"],
            Path::new("/psik/76312231.123"),
            "detstream psk --root /psik",
        )
    }

    #[test]
    fn directives_follow_the_spec() {
        let s = emit();
        for line in [
            "#SBATCH --nodes=1",
            "#SBATCH --ntasks-per-node=120",
            "#SBATCH --cpus-per-task=1",
            "#SBATCH --time=01:00:00",
            "#SBATCH --partition=milano",
            "#SBATCH --account=lcls:tmox42619",
        ] {
            assert!(s.lines().any(|l| l == line), "missing {line}\n{s}");
        }
        let active = s.find("reached active 0").unwrap();
        let user = s.find("mpirun -n120 lclstreamer -c cfg.yaml").unwrap();
        let done = s.find("reached completed 0").unwrap();
        assert!(active < user && user < done);
    }

    #[test]
    fn golden_output() {
        let expected = "#!/bin/bash
#SBATCH --job-name=lclstreamer
#SBATCH --nodes=1
#SBATCH --ntasks-per-node=120
#SBATCH --cpus-per-task=1
#SBATCH --time=01:00:00
#SBATCH --partition=milano
#SBATCH --account=lcls:tmox42619
#SBATCH --output=/dev/null

jobid=76312231.123
reached() { detstream psk --root /psik reached \"$jobid\" \"$@\"; }
jobndx=$(reached active 0) || exit 1
exec >/psik/76312231.123/log/\"$jobndx\".out 2>/psik/76312231.123/log/\"$jobndx\".err
cd /psik/76312231.123/work || { reached failed -1 >/dev/null; exit 1; }
(
mpirun -n120 lclstreamer -c cfg.yaml
)
rc=$?
if [ \"$rc\" -eq 0 ]; then reached completed 0; else reached failed \"$rc\"; fi >/dev/null
exit \"$rc\"
";
        assert_eq!(emit(), expected);
        assert_eq!(emit(), emit());
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("plain/path"), "plain/path");
        assert_eq!(shell_quote("it's here"), r"'it'\''s here'");
        assert_eq!(shell_quote(""), "''");
        assert_eq!(time_limit(90), "01:30:00");
    }
}
