import init, { starAttention, perturbationSpread, samplerStats } from "./pkg/phe_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<p class="err">${e.message ?? e}</p>`;
  }
}

const fmt = (x) => (Number.isInteger(x) ? String(x) : x.toFixed(3));

function bars(rows, label, value, scale = 1) {
  return rows
    .map((r) => {
      const w = Math.max(0, value(r) * scale * 20).toFixed(1);
      return `<div class="bar"><span style="width:9rem">${label(r)}</span>` +
        `<span class="fill" style="width:${w}rem"></span>${fmt(value(r))}</div>`;
    })
    .join("");
}

function runStar() {
  const out = $("star-out");
  guard(out, () => {
    const r = JSON.parse(starAttention(num("star-leaves"), num("star-heads"), num("star-seed")));
    out.innerHTML = r.heads
      .map((h) => `<h3>head ${h.head}</h3>` + bars(h.edges, (e) => `${e.neighbor} (${e.relation})`, (e) => e.weight))
      .join("");
  });
}

function runPerturb() {
  const out = $("pert-out");
  $("pert-mu-val").textContent = num("pert-mu").toFixed(2);
  guard(out, () => {
    const r = JSON.parse(perturbationSpread(num("pert-mu"), num("pert-q"), num("pert-seed")));
    const scale = r.norm > 0 ? 1 / r.norm : 1;
    const rows = r.distances.map((d, i) => ({ name: `copy ${i}`, d }));
    rows.push({ name: "mean of copies", d: r.centroid_shift });
    out.innerHTML = `<p>embedding norm ${r.norm.toFixed(3)}, mean distance ${r.mean_distance.toFixed(4)}</p>` +
      bars(rows, (x) => x.name, (x) => x.d, scale);
  });
}

function runSampler() {
  const out = $("samp-out");
  guard(out, () => {
    const r = JSON.parse(samplerStats(num("samp-width"), num("samp-depth"), num("samp-seeds"), num("samp-seed")));
    const rows = r.types.map((t, i) => ({ t, n: r.stats.nodes_per_type[i] }));
    const max = Math.max(...rows.map((x) => x.n), 1);
    out.innerHTML = `<p>${r.sampled_nodes} of ${r.graph_nodes} nodes, ${r.induced_edges} induced edges</p>` +
      bars(rows, (x) => x.t, (x) => x.n, 1 / max) +
      `<pre>${JSON.stringify(r.stats, null, 1)}</pre>`;
  });
}

await init();
$("star-run").addEventListener("click", runStar);
$("samp-run").addEventListener("click", runSampler);
for (const id of ["pert-mu", "pert-q", "pert-seed"]) $(id).addEventListener("input", runPerturb);
runStar();
runPerturb();
runSampler();
