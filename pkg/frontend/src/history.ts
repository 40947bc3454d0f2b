import type { ApiClient } from "./api.js";
import { artifactUrl } from "./api.js";
import type { EditRequestFields, JobState, NormalizedBox } from "./types.js";

export interface HistoryEntry {
  entryId: string;
  jobId: string;
  fields: EditRequestFields;
  box: NormalizedBox;
  submittedAt: number;
  state: JobState;
  errorText: string | null;
  artifacts: string[];
  /** object URL of the submitted image, owned by the entry */
  inputUrl: string | null;
}

/** Per-session history: every submission is a new entry; prior results stay
 * viewable and artifact URLs are always derived from the entry's own job id. */
export class HistoryStore {
  private entries: HistoryEntry[] = [];
  private activeId: string | null = null;
  private counter = 0;

  add(jobId: string, fields: EditRequestFields, box: NormalizedBox, inputUrl: string | null = null): HistoryEntry {
    const entry: HistoryEntry = {
      entryId: `h${++this.counter}`,
      jobId,
      fields: JSON.parse(JSON.stringify(fields)),
      box: { ...box },
      submittedAt: Date.now(),
      state: "queued",
      errorText: null,
      artifacts: [],
      inputUrl,
    };
    this.entries.push(entry);
    this.activeId = entry.entryId;
    return entry;
  }

  updateByJob(jobId: string, patch: Partial<Pick<HistoryEntry, "state" | "errorText" | "artifacts">>): void {
    for (const entry of this.entries) {
      if (entry.jobId === jobId) Object.assign(entry, patch);
    }
  }

  select(entryId: string): HistoryEntry | null {
    const entry = this.entries.find((e) => e.entryId === entryId) ?? null;
    if (entry) this.activeId = entry.entryId;
    return entry;
  }

  active(): HistoryEntry | null {
    return this.entries.find((e) => e.entryId === this.activeId) ?? null;
  }

  list(): readonly HistoryEntry[] {
    return this.entries;
  }
}

/** Artifact links for one entry; empty until the entry's own job is done. */
export function artifactUrlsFor(entry: HistoryEntry, client: ApiClient): Record<string, string> {
  if (entry.state !== "done") return {};
  const urls: Record<string, string> = {};
  for (const name of entry.artifacts) {
    urls[name] = artifactUrl(client, entry.jobId, name);
  }
  return urls;
}
