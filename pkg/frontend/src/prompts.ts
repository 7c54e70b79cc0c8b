/**
 * Prompt templating for text-feature export.
 *
 * Each template carries exactly one `{}` placeholder for the class name.
 * Ensembling encodes every template per class, averages the unit-normalized
 * features, and re-normalizes the average.
 */

export const DEFAULT_TEMPLATE = "A photo of {}.";

/** A broad general-purpose template list for ensembling (convention, not a
 * fixed standard; any template file can be supplied instead). */
export const ENSEMBLE_TEMPLATES = [
  "A photo of {}.",
  "a photo of a {}.",
  "a photo of the {}.",
  "a bad photo of a {}.",
  "a good photo of a {}.",
  "a cropped photo of a {}.",
  "a close-up photo of a {}.",
  "a bright photo of a {}.",
  "a dark photo of a {}.",
  "a photo of a small {}.",
  "a photo of a large {}.",
  "a blurry photo of a {}.",
  "a drawing of a {}.",
  "a painting of a {}.",
  "an image of {}.",
];

export interface PromptSpec {
  templates: string[];
  classNames: string[];
  ensemble: boolean;
}

export function validateTemplates(templates: string[]): void {
  for (const template of templates) {
    const count = template.split("{}").length - 1;
    if (count !== 1) {
      throw new Error(`template must contain exactly one {} placeholder: ${JSON.stringify(template)}`);
    }
  }
}

export function makePromptSpec(
  classNames: string[],
  templates: string[] = [DEFAULT_TEMPLATE],
  ensemble = false,
): PromptSpec {
  if (classNames.length === 0) {
    throw new Error("class names must be nonempty");
  }
  validateTemplates(templates);
  return { templates, classNames, ensemble };
}

export function renderPrompts(spec: PromptSpec, className: string): string[] {
  const active = spec.ensemble ? spec.templates : spec.templates.slice(0, 1);
  return active.map((template) => template.replace("{}", className));
}
