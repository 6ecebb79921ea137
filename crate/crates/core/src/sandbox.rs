//! Restricted subprocesses for untrusted code.
//!
//! [`Isolation::Confined`] runs the program in fresh mount and network
//! namespaces, chrooted into a throwaway root that holds read-only system
//! directories plus the explicitly bound paths, under a dedicated
//! unprivileged uid with resource limits. Nothing else of the host
//! filesystem is reachable and there is no network. It needs root.
//!
//! [`Isolation::Process`] only applies resource limits, a private working
//! directory and a cleared environment. Paths are not remapped.

use std::ffi::CString;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use tempfile::TempDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    Confined,
    Process,
}

impl Isolation {
    /// `Confined` when this process can build namespaced sandboxes, else `Process`.
    pub fn detect() -> Isolation {
        static DETECTED: OnceLock<Isolation> = OnceLock::new();
        *DETECTED.get_or_init(|| {
            if unsafe { libc::geteuid() } != 0 {
                return Isolation::Process;
            }
            let probe = Sandbox::new(Isolation::Confined, Vec::new(), "/tmp", SandboxLimits::default())
                .and_then(|sb| sb.command("/bin/sh", ["-c", "exit 0"]).status());
            match probe {
                Ok(status) if status.success() => Isolation::Confined,
                _ => Isolation::Process,
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandboxLimits {
    pub cpu_seconds: u64,
    pub memory_bytes: u64,
    pub max_processes: u64,
    pub file_size_bytes: u64,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            cpu_seconds: 600,
            memory_bytes: 4 * 1024 * 1024 * 1024,
            max_processes: 64,
            file_size_bytes: 256 * 1024 * 1024,
        }
    }
}

/// A host path made visible inside the sandbox at `inside`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bind {
    pub host: PathBuf,
    pub inside: PathBuf,
    pub writable: bool,
}

impl Bind {
    pub fn read_only(host: impl Into<PathBuf>, inside: impl Into<PathBuf>) -> Self {
        Self {
            host: host.into(),
            inside: inside.into(),
            writable: false,
        }
    }

    pub fn writable(host: impl Into<PathBuf>, inside: impl Into<PathBuf>) -> Self {
        Self {
            host: host.into(),
            inside: inside.into(),
            writable: true,
        }
    }
}

const SYSTEM_DIRS: &[&str] = &["/usr", "/bin", "/sbin", "/lib", "/lib64", "/lib32", "/libx32"];
const SYSTEM_FILES: &[&str] = &["/etc/ld.so.cache", "/dev/null", "/dev/zero", "/dev/urandom", "/dev/random"];
const SANDBOX_PATH: &str = "PATH=/usr/local/bin:/usr/bin:/bin";
const UID_BASE: u32 = 200_000;
const UID_SPAN: u32 = 50_000;

static NEXT_UID: AtomicU32 = AtomicU32::new(0);

struct Mount {
    source: CString,
    target: CString,
    writable: bool,
}

/// A prepared sandbox. Each one gets its own uid, so [`Sandbox::kill_all`]
/// reaps every process it spawned, including ones that left the process group.
pub struct Sandbox {
    isolation: Isolation,
    root: Option<TempDir>,
    binds: Vec<Bind>,
    workdir: PathBuf,
    limits: SandboxLimits,
    uid: u32,
}

impl Sandbox {
    pub fn new(
        isolation: Isolation,
        binds: Vec<Bind>,
        workdir: impl Into<PathBuf>,
        limits: SandboxLimits,
    ) -> io::Result<Self> {
        let uid = UID_BASE + NEXT_UID.fetch_add(1, Ordering::Relaxed) % UID_SPAN;
        let workdir = workdir.into();
        let root = match isolation {
            Isolation::Process => None,
            Isolation::Confined => Some(prepare_root(&binds, uid)?),
        };
        Ok(Self {
            isolation,
            root,
            binds,
            workdir,
            limits,
            uid,
        })
    }

    pub fn isolation(&self) -> Isolation {
        self.isolation
    }

    pub fn uid(&self) -> u32 {
        self.uid
    }

    /// The path a sandboxed program should be given to reach `inside`.
    /// Identity when confined; mapped back to the bound host path otherwise.
    pub fn visible_path(&self, inside: impl AsRef<Path>) -> PathBuf {
        let inside = inside.as_ref();
        if self.isolation == Isolation::Confined {
            return inside.to_path_buf();
        }
        self.binds
            .iter()
            .filter_map(|b| inside.strip_prefix(&b.inside).ok().map(|rest| (b, rest)))
            .max_by_key(|(b, _)| b.inside.as_os_str().len())
            .map(|(b, rest)| if rest.as_os_str().is_empty() { b.host.clone() } else { b.host.join(rest) })
            .unwrap_or_else(|| inside.to_path_buf())
    }

    /// A command for `program` (an inside path) configured to enter the sandbox.
    pub fn command<I, S>(&self, program: impl AsRef<Path>, args: I) -> Command
    where
        I: IntoIterator<Item = S>,
        S: AsRef<std::ffi::OsStr>,
    {
        let mut cmd = Command::new(self.visible_path(program));
        cmd.args(args).env_clear();
        let (name, value) = SANDBOX_PATH.split_once('=').unwrap();
        cmd.env(name, value).env("HOME", "/tmp").env("LANG", "C.UTF-8");
        let limits = self.limits;
        match &self.root {
            None => {
                cmd.current_dir(self.visible_path(&self.workdir));
                unsafe {
                    cmd.pre_exec(move || {
                        if libc::setsid() < 0 {
                            return Err(io::Error::last_os_error());
                        }
                        apply_limits(&limits, false)
                    });
                }
            }
            Some(root) => {
                let mounts = mount_plan(root.path(), &self.binds);
                let root_c = cstr(root.path());
                let workdir_c = cstr(&self.workdir);
                let slash = CString::new("/").unwrap();
                let uid = self.uid;
                unsafe {
                    cmd.pre_exec(move || {
                        enter_confinement(&mounts, &root_c, &workdir_c, &slash, &limits, uid)
                    });
                }
            }
        }
        cmd
    }

    /// Kills every process running as this sandbox's uid (confined mode).
    pub fn kill_all(&self) {
        if self.isolation != Isolation::Confined {
            return;
        }
        let uid = self.uid;
        let mut helper = Command::new("/bin/true");
        helper.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
        unsafe {
            helper.pre_exec(move || {
                if libc::syscall(libc::SYS_setresuid, uid, uid, uid) < 0 {
                    return Err(io::Error::last_os_error());
                }
                libc::kill(-1, libc::SIGKILL);
                Ok(())
            });
        }
        let _ = helper.status();
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        self.kill_all();
    }
}

fn cstr(path: &Path) -> CString {
    CString::new(path.as_os_str().as_bytes()).expect("path without NUL")
}

fn inside_to_root(root: &Path, inside: &Path) -> PathBuf {
    root.join(inside.strip_prefix("/").unwrap_or(inside))
}

fn prepare_root(binds: &[Bind], uid: u32) -> io::Result<TempDir> {
    let root = tempfile::Builder::new().prefix("gauntlet-sandbox-").tempdir()?;
    fs::set_permissions(root.path(), fs::Permissions::from_mode(0o755))?;
    for dir in SYSTEM_DIRS {
        let host = Path::new(dir);
        let Ok(meta) = fs::symlink_metadata(host) else { continue };
        let target = inside_to_root(root.path(), host);
        if meta.file_type().is_symlink() {
            symlink(fs::read_link(host)?, &target)?;
        } else if meta.is_dir() {
            fs::create_dir_all(&target)?;
        }
    }
    for file in SYSTEM_FILES {
        if Path::new(file).exists() {
            let target = inside_to_root(root.path(), Path::new(file));
            fs::create_dir_all(target.parent().unwrap())?;
            fs::File::create(&target)?;
        }
    }
    let tmp = root.path().join("tmp");
    fs::create_dir_all(&tmp)?;
    fs::set_permissions(&tmp, fs::Permissions::from_mode(0o1777))?;
    for bind in binds {
        let meta = fs::metadata(&bind.host)?;
        let target = inside_to_root(root.path(), &bind.inside);
        if meta.is_dir() {
            fs::create_dir_all(&target)?;
            let mode = meta.permissions().mode();
            if mode & 0o005 != 0o005 {
                fs::set_permissions(&bind.host, fs::Permissions::from_mode(mode | 0o755))?;
            }
        } else {
            fs::create_dir_all(target.parent().unwrap())?;
            fs::File::create(&target)?;
            let mode = meta.permissions().mode();
            if mode & 0o004 == 0 {
                fs::set_permissions(&bind.host, fs::Permissions::from_mode(mode | 0o644))?;
            }
        }
        if bind.writable {
            std::os::unix::fs::chown(&bind.host, Some(uid), Some(uid))?;
        }
        // Parent directories inside the root must be traversable.
        let mut dir = target.parent();
        while let Some(d) = dir {
            if d == root.path() {
                break;
            }
            fs::set_permissions(d, fs::Permissions::from_mode(0o755))?;
            dir = d.parent();
        }
    }
    Ok(root)
}

fn mount_plan(root: &Path, binds: &[Bind]) -> Vec<Mount> {
    let mut mounts = Vec::new();
    for dir in SYSTEM_DIRS {
        let host = Path::new(dir);
        if fs::symlink_metadata(host).is_ok_and(|m| m.is_dir()) {
            mounts.push(Mount {
                source: cstr(host),
                target: cstr(&inside_to_root(root, host)),
                writable: false,
            });
        }
    }
    for file in SYSTEM_FILES {
        let host = Path::new(file);
        if host.exists() {
            mounts.push(Mount {
                source: cstr(host),
                target: cstr(&inside_to_root(root, host)),
                writable: false,
            });
        }
    }
    for bind in binds {
        mounts.push(Mount {
            source: cstr(&bind.host),
            target: cstr(&inside_to_root(root, &bind.inside)),
            writable: bind.writable,
        });
    }
    mounts
}

fn check(rc: libc::c_int) -> io::Result<()> {
    if rc < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> io::Result<()> {
    let limit = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    check(unsafe { libc::setrlimit(resource, &limit) })
}

// Runs between fork and exec: no allocation, raw syscalls only.
fn apply_limits(limits: &SandboxLimits, per_uid: bool) -> io::Result<()> {
    set_limit(libc::RLIMIT_CPU, limits.cpu_seconds, limits.cpu_seconds + 1)?;
    set_limit(libc::RLIMIT_AS, limits.memory_bytes, limits.memory_bytes)?;
    set_limit(libc::RLIMIT_FSIZE, limits.file_size_bytes, limits.file_size_bytes)?;
    set_limit(libc::RLIMIT_CORE, 0, 0)?;
    if per_uid {
        set_limit(libc::RLIMIT_NPROC, limits.max_processes, limits.max_processes)?;
    }
    Ok(())
}

fn enter_confinement(
    mounts: &[Mount],
    root: &CString,
    workdir: &CString,
    slash: &CString,
    limits: &SandboxLimits,
    uid: u32,
) -> io::Result<()> {
    unsafe {
        check(libc::setsid())?;
        check(libc::unshare(
            libc::CLONE_NEWNS | libc::CLONE_NEWNET | libc::CLONE_NEWIPC | libc::CLONE_NEWUTS,
        ))?;
        check(libc::mount(
            std::ptr::null(),
            slash.as_ptr(),
            std::ptr::null(),
            libc::MS_REC | libc::MS_PRIVATE,
            std::ptr::null(),
        ))?;
        for m in mounts {
            check(libc::mount(
                m.source.as_ptr(),
                m.target.as_ptr(),
                std::ptr::null(),
                libc::MS_BIND,
                std::ptr::null(),
            ))?;
            let mut flags = libc::MS_BIND | libc::MS_REMOUNT | libc::MS_NOSUID;
            if !m.writable {
                flags |= libc::MS_RDONLY;
            }
            check(libc::mount(
                std::ptr::null(),
                m.target.as_ptr(),
                std::ptr::null(),
                flags,
                std::ptr::null(),
            ))?;
        }
        check(libc::chroot(root.as_ptr()))?;
        check(libc::chdir(slash.as_ptr()))?;
        apply_limits(limits, true)?;
        if libc::syscall(libc::SYS_setgroups, 0usize, std::ptr::null::<libc::gid_t>()) < 0
            || libc::syscall(libc::SYS_setresgid, uid, uid, uid) < 0
            || libc::syscall(libc::SYS_setresuid, uid, uid, uid) < 0
        {
            return Err(io::Error::last_os_error());
        }
        check(libc::chdir(workdir.as_ptr()))?;
        check(libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0))?;
    }
    Ok(())
}

/// How a supervised run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Exited(ExitStatus),
    TimedOut,
    OutputExceeded,
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub termination: Termination,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

/// Cooperative cancellation flag shared with supervised runs. A child token
/// is cancelled when it or any ancestor is.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<CancelInner>);

#[derive(Debug, Default)]
struct CancelInner {
    flag: AtomicBool,
    parent: Option<CancelToken>,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn child(&self) -> Self {
        Self(Arc::new(CancelInner {
            flag: AtomicBool::new(false),
            parent: Some(self.clone()),
        }))
    }

    pub fn cancel(&self) {
        self.0.flag.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.flag.load(Ordering::SeqCst) || self.0.parent.as_ref().is_some_and(CancelToken::is_cancelled)
    }
}

const STDERR_KEEP: usize = 64 * 1024;

/// Spawns `cmd`, feeds it `stdin`, and collects bounded output until it exits,
/// the wall deadline passes, stdout exceeds `output_limit`, or `cancel` fires.
/// Whatever the outcome, the process group and sandbox uid are killed.
pub fn supervise(
    sandbox: &Sandbox,
    mut cmd: Command,
    stdin: Option<Vec<u8>>,
    wall: Duration,
    output_limit: usize,
    cancel: Option<&CancelToken>,
) -> io::Result<RunOutput> {
    cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    let mut child: Child = cmd.spawn()?;
    let pid = child.id() as i32;
    if let Some(data) = stdin {
        let mut pipe = child.stdin.take().unwrap();
        std::thread::spawn(move || {
            use std::io::Write;
            let _ = pipe.write_all(&data);
        });
    }
    let (exceeded_tx, exceeded_rx) = mpsc::channel::<()>();
    let mut out_pipe = child.stdout.take().unwrap();
    let stdout_reader = std::thread::spawn(move || {
        use std::io::Read;
        let mut buf = Vec::new();
        let _ = (&mut out_pipe).take(output_limit as u64 + 1).read_to_end(&mut buf);
        if buf.len() > output_limit {
            let _ = exceeded_tx.send(());
        }
        buf
    });
    let mut err_pipe = child.stderr.take().unwrap();
    let stderr_reader = std::thread::spawn(move || {
        use std::io::Read;
        let mut buf = Vec::new();
        let mut chunk = [0u8; 8192];
        while let Ok(n) = err_pipe.read(&mut chunk) {
            if n == 0 {
                break;
            }
            if buf.len() < STDERR_KEEP {
                buf.extend_from_slice(&chunk[..n.min(STDERR_KEEP - buf.len())]);
            }
        }
        buf
    });
    let (status_tx, status_rx) = mpsc::channel();
    std::thread::spawn(move || {
        let _ = status_tx.send(child.wait());
    });

    let deadline = Instant::now() + wall;
    let mut termination = loop {
        if exceeded_rx.try_recv().is_ok() {
            break Termination::OutputExceeded;
        }
        if cancel.is_some_and(|c| c.is_cancelled()) {
            break Termination::Cancelled;
        }
        let now = Instant::now();
        if now >= deadline {
            break Termination::TimedOut;
        }
        let slice = (deadline - now).min(Duration::from_millis(20));
        match status_rx.recv_timeout(slice) {
            Ok(status) => break Termination::Exited(status?),
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(io::Error::other("child waiter vanished"));
            }
        }
    };
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
        libc::kill(pid, libc::SIGKILL);
    }
    sandbox.kill_all();
    if !matches!(termination, Termination::Exited(_)) {
        let _ = status_rx.recv_timeout(Duration::from_secs(5));
    }
    let mut stdout = stdout_reader.join().unwrap_or_default();
    if stdout.len() > output_limit {
        if matches!(termination, Termination::Exited(_)) {
            termination = Termination::OutputExceeded;
        }
        stdout.truncate(output_limit);
    }
    let stderr = stderr_reader.join().unwrap_or_default();
    Ok(RunOutput {
        termination,
        stdout,
        stderr,
    })
}
