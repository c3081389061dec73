export const answer = (n: number): number => n * 2;
