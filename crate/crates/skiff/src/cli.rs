//! Command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::compose::{self, SimulateOptions, DEFAULT_WORKSPACE};
use crate::coreenv::{self, RuntimeState};
use crate::error::{Error, Result, EXIT_USAGE};
use crate::kconfig::{self, KconfigFragment};
use crate::layers::{self, LayerCatalog, LayerId, Marker, Selection};
use crate::ota::{self, OtaManifest, PushStatus};
use crate::persist::{self, MediaLayout};

pub const CONFIG_ENV: &str = "SKIFF_CONFIG";

/// One extension command offered by a layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommandEntry {
    /// `cmd/<layer>/<command>`
    pub target: String,
    pub description: String,
    pub layer: LayerId,
    pub command: String,
}

impl CommandEntry {
    pub fn target_for(layer: &LayerId, command: &str) -> String {
        format!("cmd/{layer}/{command}")
    }
}

/// Commands of listed layers, sorted by layer id. With a selection only
/// the resolved layers contribute.
pub fn command_entries(catalog: &LayerCatalog, selection: Option<&Selection>) -> Result<Vec<CommandEntry>> {
    let layers: Vec<&layers::Layer> = match selection {
        Some(sel) => {
            let resolved = layers::resolve_order(sel, catalog)?;
            let mut ids: Vec<LayerId> = resolved.into_iter().map(|l| l.id).collect();
            ids.sort();
            ids.iter().filter_map(|id| catalog.get(id)).collect()
        }
        None => catalog.ids().filter_map(|id| catalog.get(id)).collect(),
    };
    Ok(layers
        .into_iter()
        .filter(|l| !l.metadata.unlisted)
        .flat_map(|l| {
            l.metadata.commands.iter().map(move |c| CommandEntry {
                target: CommandEntry::target_for(&l.id, &c.name),
                description: c.description.clone(),
                layer: l.id.clone(),
                command: c.name.clone(),
            })
        })
        .collect())
}

/// The help screen: listed layers with their descriptions, then the
/// extension commands.
pub fn render_help(catalog: &LayerCatalog, selection: Option<&Selection>) -> Result<String> {
    let mut out = String::from("Configuration layers:\n");
    for id in catalog.ids() {
        let layer = catalog.get(id).expect("catalog id");
        if layer.metadata.unlisted {
            continue;
        }
        if layer.metadata.description.is_empty() {
            let _ = writeln!(out, "{id}");
        } else {
            let _ = writeln!(out, "{id}: {}", layer.metadata.description);
        }
    }
    out.push_str("\nCommands:\n");
    for entry in command_entries(catalog, selection)? {
        if entry.description.is_empty() {
            let _ = writeln!(out, "{}", entry.target);
        } else {
            let _ = writeln!(out, "{}: {}", entry.target, entry.description);
        }
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(
    name = "skiff",
    version,
    about = "Compose layered embedded Linux configurations",
    disable_help_subcommand = true
)]
struct Cli {
    /// Layer search root; later roots shadow earlier ones.
    #[arg(long = "configs", global = true, value_name = "DIR")]
    configs: Vec<PathBuf>,
    /// Comma-separated layer selection (overrides SKIFF_CONFIG).
    #[arg(long, global = true, value_name = "LAYERS")]
    config: Option<String>,
    #[arg(long, global = true, default_value = DEFAULT_WORKSPACE)]
    workspace: String,
    /// Directory holding local overrides.
    #[arg(long, global = true, value_name = "DIR")]
    overrides_root: Option<PathBuf>,
    /// Allow running layer commands and hooks.
    #[arg(long, global = true)]
    allow_exec: bool,
    /// Output root; compositions go to <output>/workspaces/<workspace>.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    output: PathBuf,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// List configuration layers and extension commands.
    Help,
    /// Resolve the selection and write configs, manifests and the overlay.
    Compose {
        /// Run pre/post hooks (requires --allow-exec).
        #[arg(long)]
        run_hooks: bool,
        /// Print the plan instead of writing it.
        #[arg(long)]
        dry_run: bool,
    },
    /// Merge fragment files in the given order and print the result.
    MergeConfig {
        #[arg(required = true)]
        fragments: Vec<PathBuf>,
    },
    /// Root filesystem overlay operations.
    Overlay {
        #[command(subcommand)]
        command: OverlayCmd,
    },
    /// List or run layer extension commands.
    Commands {
        #[command(subcommand)]
        command: Option<CommandsCmd>,
    },
    /// Containerized environment configuration.
    Core {
        #[command(subcommand)]
        command: CoreCmd,
    },
    /// Over-the-air image updates.
    Ota {
        #[command(subcommand)]
        command: OtaCmd,
    },
    /// Persistent partition planning.
    Persist {
        #[command(subcommand)]
        command: PersistCmd,
    },
}

#[derive(Debug, Subcommand)]
enum OverlayCmd {
    /// Apply the composed overlay onto a directory.
    Apply { target: PathBuf },
}

#[derive(Debug, Subcommand)]
enum CommandsCmd {
    List,
    /// Run `cmd/<layer>/<name>`.
    Run {
        target: String,
        #[arg(trailing_var_arg = true)]
        args: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum CoreCmd {
    Validate { file: PathBuf },
    /// Print the container and container user for a login user.
    Route { user: String, file: PathBuf },
    /// Print the steps needed to converge the runtime state.
    Plan {
        file: PathBuf,
        /// JSON runtime state; empty if omitted.
        #[arg(long)]
        state: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum OtaCmd {
    /// Build a manifest for an image directory.
    Manifest {
        dir: PathBuf,
        #[arg(long)]
        version: String,
        /// Also write it to <dir>/manifest.
        #[arg(long)]
        write: bool,
    },
    /// Push an image directory to a target.
    Push {
        dir: PathBuf,
        target: String,
        /// Version for a manifest built on the fly when <dir>/manifest is absent.
        #[arg(long)]
        version: Option<String>,
    },
    Verify { target: String },
    Rollback { target: String },
    /// Clear the lock and leftovers of an interrupted session.
    Recover { target: String },
}

#[derive(Debug, Subcommand)]
enum PersistCmd {
    /// Plan a boot/rootfs/persist layout, or check a vendor descriptor.
    Plan(PlanArgs),
    /// Grow the persist partition of a layout descriptor to the media size.
    Grow {
        descriptor: PathBuf,
        #[arg(long, value_parser = size_arg)]
        media: u64,
        /// Rewrite the descriptor in place.
        #[arg(long)]
        write: bool,
    },
    /// Create the persist directory tree.
    Scaffold {
        target: PathBuf,
        #[arg(long, value_parser = size_arg)]
        swap: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long, value_parser = size_arg, required_unless_present = "descriptor")]
    media: Option<u64>,
    #[arg(long, value_parser = size_arg, default_value = "64M")]
    boot: u64,
    #[arg(long, value_parser = size_arg, default_value = "512M")]
    rootfs: u64,
    #[arg(long, value_parser = size_arg, default_value = "0")]
    prefix: u64,
    /// Vendor layout descriptor used instead of the default three partitions.
    #[arg(long, conflicts_with = "media")]
    descriptor: Option<PathBuf>,
}

fn size_arg(s: &str) -> std::result::Result<u64, String> {
    persist::parse_size(s).map_err(|e| e.to_string())
}

struct Context<'a> {
    cli: &'a Cli,
    env: &'a BTreeMap<String, String>,
}

impl Context<'_> {
    fn catalog(&self) -> Result<LayerCatalog> {
        if self.cli.configs.is_empty() {
            layers::discover_layers(&[Path::new("configs")])
        } else {
            layers::discover_layers(&self.cli.configs)
        }
    }

    /// Flag first, then the environment.
    fn selection(&self) -> Result<Option<Selection>> {
        let text = self.cli.config.clone().or_else(|| self.env.get(CONFIG_ENV).cloned());
        match text {
            Some(t) => {
                let sel = layers::parse_selection(&t)?;
                Ok((!sel.is_empty()).then_some(sel))
            }
            None => Ok(None),
        }
    }

    fn require_selection(&self) -> Result<Selection> {
        self.selection()?.ok_or(Error::NoLayersSelected)
    }

    fn plan(&self) -> Result<compose::BuildPlan> {
        let catalog = self.catalog()?;
        let selection = self.require_selection()?;
        compose::build_plan(&selection, &catalog, &self.cli.workspace, self.cli.overrides_root.as_deref())
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs the command line and returns the process exit code.
pub fn run(argv: &[String], env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    let Some(command) = &cli.command else {
        let usage = <Cli as clap::CommandFactory>::command().render_usage().to_string();
        let _ = writeln!(err, "{usage}\n\nRun `skiff --help` for the list of subcommands.");
        return EXIT_USAGE;
    };
    let ctx = Context { cli: &cli, env };
    match dispatch(&ctx, command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(ctx: &Context<'_>, command: &Cmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Cmd::Help => {
            let catalog = ctx.catalog()?;
            let selection = ctx.selection()?;
            out.write_all(render_help(&catalog, selection.as_ref())?.as_bytes()).map_err(io_out)?;
        }
        Cmd::Compose { run_hooks, dry_run } => {
            if *run_hooks && !ctx.cli.allow_exec {
                return Err(Error::Usage("--run-hooks requires --allow-exec".into()));
            }
            let plan = ctx.plan()?;
            for d in &plan.diagnostics {
                let _ = writeln!(err, "note: {d}");
            }
            if *dry_run {
                out.write_all(plan.to_canonical_json().as_bytes()).map_err(io_out)?;
                return Ok(0);
            }
            let dir = compose::workspace_dir(&ctx.cli.output, &plan.workspace);
            let artifacts = compose::simulate_build(&plan, &dir, SimulateOptions { run_hooks: *run_hooks })?;
            writeln!(
                out,
                "composed {} ({} layers) into {}: {} files, {} overlay entries",
                plan.selection,
                plan.layers.len(),
                dir.display(),
                artifacts.written.len(),
                artifacts.overlay.entries()
            )
            .map_err(io_out)?;
        }
        Cmd::MergeConfig { fragments } => {
            let parsed: Vec<KconfigFragment> = fragments
                .iter()
                .map(|p| kconfig::read_fragment(p))
                .collect::<Result<_>>()?;
            let merged = kconfig::merge_fragments(&parsed);
            out.write_all(kconfig::render_config(&merged).as_bytes()).map_err(io_out)?;
        }
        Cmd::Overlay {
            command: OverlayCmd::Apply { target },
        } => {
            let plan = ctx.plan()?;
            let report = compose::apply_overlay(&plan.overlay, target)?;
            writeln!(
                out,
                "applied {} files, {} directories, {} symlinks ({} bytes) to {}",
                report.files,
                report.directories,
                report.symlinks,
                report.bytes,
                target.display()
            )
            .map_err(io_out)?;
        }
        Cmd::Commands { command } => return run_commands(ctx, command.as_ref().unwrap_or(&CommandsCmd::List), out),
        Cmd::Core { command } => return run_core(command, out, err),
        Cmd::Ota { command } => return run_ota(command, out, err),
        Cmd::Persist { command } => run_persist(command, out)?,
    }
    Ok(0)
}

fn run_commands(ctx: &Context<'_>, command: &CommandsCmd, out: &mut dyn Write) -> Result<i32> {
    let catalog = ctx.catalog()?;
    let selection = ctx.selection()?;
    let entries = command_entries(&catalog, selection.as_ref())?;
    match command {
        CommandsCmd::List => {
            for e in &entries {
                writeln!(out, "{}: {}", e.target, e.description).map_err(io_out)?;
            }
            Ok(0)
        }
        CommandsCmd::Run { target, args } => {
            let entry = entries
                .iter()
                .find(|e| &e.target == target)
                .ok_or_else(|| Error::Usage(format!("unknown command {target}")))?;
            if !ctx.cli.allow_exec {
                return Err(Error::Usage(format!("running {target} requires --allow-exec")));
            }
            let layer = catalog.get(&entry.layer).expect("entry layer in catalog");
            let ext = layer.path(Marker::Extensions);
            let mut cmd = if ext.join("Makefile").is_file() {
                let mut c = Command::new("make");
                c.arg("-C").arg(&ext).arg(&entry.command);
                c
            } else if ext.join(&entry.command).is_file() {
                Command::new(ext.join(&entry.command))
            } else {
                return Err(Error::Exec(format!("layer {} has no implementation for {}", entry.layer, entry.command)));
            };
            cmd.args(args)
                .env("SKIFF_WORKSPACE", &ctx.cli.workspace)
                .env("SKIFF_LAYER_DIR", &layer.root);
            if let Some(sel) = &selection {
                cmd.env(CONFIG_ENV, sel.to_string());
            }
            let status = cmd.status().map_err(|e| Error::Exec(format!("{target}: {e}")))?;
            if status.success() {
                Ok(0)
            } else {
                Err(Error::Exec(format!("{target} exited with {status}")))
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn run_core(command: &CoreCmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        CoreCmd::Validate { file } => {
            let config = coreenv::parse_core_config(&read_text(file)?)?;
            for w in &config.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            writeln!(
                out,
                "ok: {} containers, {} users",
                config.containers.len(),
                config.users.len()
            )
            .map_err(io_out)?;
        }
        CoreCmd::Route { user, file } => {
            let config = coreenv::parse_core_config(&read_text(file)?)?;
            let route = coreenv::route_session(user, &config)?;
            writeln!(out, "{} {}", route.container, route.container_user).map_err(io_out)?;
        }
        CoreCmd::Plan { file, state } => {
            let config = coreenv::parse_core_config(&read_text(file)?)?;
            let state: RuntimeState = match state {
                Some(p) => serde_json::from_str(&read_text(p)?)
                    .map_err(|e| Error::parse(p, e.line(), e.to_string()))?,
                None => RuntimeState::default(),
            };
            for step in coreenv::plan_setup(&config, &state)? {
                writeln!(out, "{step}").map_err(io_out)?;
            }
        }
    }
    Ok(0)
}

fn run_ota(command: &OtaCmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        OtaCmd::Manifest { dir, version, write } => {
            let manifest = ota::build_manifest(dir, version)?;
            for w in manifest.warnings() {
                let _ = writeln!(err, "warning: {w}");
            }
            let text = manifest.to_text();
            if *write {
                let path = dir.join(ota::ACTIVE_MANIFEST);
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            out.write_all(text.as_bytes()).map_err(io_out)?;
        }
        OtaCmd::Push { dir, target, version } => {
            let existing = dir.join(ota::ACTIVE_MANIFEST);
            let manifest = if existing.is_file() {
                OtaManifest::parse(&read_text(&existing)?)?
            } else if let Some(v) = version {
                ota::build_manifest(dir, v)?
            } else {
                return Err(Error::Usage(format!(
                    "{} has no manifest; pass --version to build one",
                    dir.display()
                )));
            };
            let mut transport = ota::open_target(target)?;
            let report = ota::push_update(&manifest, dir, &mut transport)?;
            match report.status {
                PushStatus::UpToDate => writeln!(out, "up-to-date: version {}", report.to_version),
                PushStatus::Updated => writeln!(
                    out,
                    "updated {} -> {}: {} files ({} bytes) transferred, {} unchanged",
                    report.from_version.as_deref().unwrap_or("(none)"),
                    report.to_version,
                    report.transferred.len(),
                    report.bytes_transferred,
                    report.skipped.len()
                ),
            }
            .map_err(io_out)?;
        }
        OtaCmd::Verify { target } => {
            let transport = ota::open_target(target)?;
            let report = ota::verify_target(&transport)?;
            out.write_all(report.to_string().as_bytes()).map_err(io_out)?;
            if !report.has_manifest() {
                return Err(Error::NoActiveManifest);
            }
            if !report.passed() {
                let _ = writeln!(err, "error: verification failed");
                return Ok(crate::error::EXIT_IO);
            }
        }
        OtaCmd::Rollback { target } => {
            let mut transport = ota::open_target(target)?;
            let r = ota::rollback(&mut transport)?;
            writeln!(out, "rolled back {} -> {}", r.from_version, r.to_version).map_err(io_out)?;
        }
        OtaCmd::Recover { target } => {
            let mut transport = ota::open_target(target)?;
            let r = ota::recover(&mut transport)?;
            writeln!(
                out,
                "lock cleared: {}, staged files removed: {}, stale objects removed: {}",
                r.lock_cleared,
                r.staging_removed.len(),
                r.objects_removed.len()
            )
            .map_err(io_out)?;
        }
    }
    Ok(0)
}

fn run_persist(command: &PersistCmd, out: &mut dyn Write) -> Result<()> {
    match command {
        PersistCmd::Plan(args) => {
            let layout = match (&args.descriptor, args.media) {
                (Some(path), _) => MediaLayout::from_descriptor(&read_text(path)?)?,
                (None, Some(media)) => persist::plan_layout(media, args.boot, args.rootfs, args.prefix)?,
                (None, None) => return Err(Error::Usage("--media or --descriptor is required".into())),
            };
            out.write_all(layout.to_descriptor().as_bytes()).map_err(io_out)?;
        }
        PersistCmd::Grow { descriptor, media, write } => {
            let layout = MediaLayout::from_descriptor(&read_text(descriptor)?)?;
            let grown = persist::grow_persist(&layout, *media)?;
            let text = grown.to_descriptor();
            if *write {
                fs::write(descriptor, &text).map_err(|e| Error::io(descriptor, e))?;
            }
            out.write_all(text.as_bytes()).map_err(io_out)?;
        }
        PersistCmd::Scaffold { target, swap } => {
            let tree = persist::scaffold_tree(target, *swap)?;
            for e in &tree.entries {
                let state = if e.created { "created" } else { "exists" };
                writeln!(out, "{state} {}", tree.root.join(&e.name).display()).map_err(io_out)?;
            }
            if let Some(size) = tree.swapfile {
                writeln!(out, "swapfile {size} bytes").map_err(io_out)?;
            }
        }
    }
    Ok(())
}

/// Entry point for the binary.
pub fn main_with_process_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(&argv, &env, &mut stdout.lock(), &mut stderr.lock())
}
